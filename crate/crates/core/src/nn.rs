//! Parameter storage and the small set of layers the networks are built from.
//!
//! Parameters are candle [`Var`]s kept in a name-sorted map so checkpoints and
//! optimizer state iterate in a stable order. Initialization draws from an
//! explicit RNG; nothing here touches global random state.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;

use crate::diffusion::gaussian;
use crate::error::{Error, Result};

/// Named trainable tensors.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, value: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(t)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::zeros(shape, self.dtype, &self.device)?;
        self.insert(name, t)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<Tensor> {
        let t = (Tensor::ones(shape, self.dtype, &self.device)? * value)?;
        self.insert(name, t)
    }

    /// Gaussian init with standard deviation `1/√fan_in`.
    pub fn fan_in<R: Rng + ?Sized>(
        &mut self,
        name: String,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<Tensor> {
        let std = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = (gaussian(rng, shape, self.dtype, &self.device)? * std)?;
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites `name` in place; every layer holding the tensor sees it.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter {name} is {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

/// Shared multiply-accumulate tally for instrumented layers.
#[derive(Debug, Clone, Default)]
pub struct MacCounter(Arc<AtomicU64>);

impl MacCounter {
    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

/// Weight initialization for a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    FanIn,
    Zero,
}

/// How borders are filled before a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zeros,
    Replicate,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    pad: usize,
    dilation: usize,
    padding: Padding,
    counter: Option<MacCounter>,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
    pub init: Init,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride: 1,
            dilation: 1,
            padding: Padding::Zeros,
            init: Init::FanIn,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn padding(mut self, p: Padding) -> Self {
        self.padding = p;
        self
    }

    pub fn zero_init(mut self) -> Self {
        self.init = Init::Zero;
        self
    }
}

impl Conv2d {
    /// "Same" convolution (padding = dilation·(k−1)/2) registered under `name`.
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = [spec.c_out, spec.c_in, spec.kernel, spec.kernel];
        let weight = match spec.init {
            Init::FanIn => ps.fan_in(
                format!("{name}.weight"),
                &shape,
                spec.c_in * spec.kernel * spec.kernel,
                rng,
            )?,
            Init::Zero => ps.zeros(format!("{name}.weight"), &shape)?,
        };
        let bias = ps.zeros(format!("{name}.bias"), &[spec.c_out])?;
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            pad: spec.dilation * (spec.kernel - 1) / 2,
            dilation: spec.dilation,
            padding: spec.padding,
            counter: None,
        })
    }

    pub fn with_counter(mut self, counter: &MacCounter) -> Self {
        self.counter = Some(counter.clone());
        self
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c_in = x.dim(1)?;
        if c_in != self.in_channels() {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {c_in}",
                self.in_channels()
            )));
        }
        let y = match self.padding {
            Padding::Zeros => x.conv2d(&self.weight, self.pad, self.stride, self.dilation, 1)?,
            Padding::Replicate => {
                let x = x
                    .pad_with_same(2, self.pad, self.pad)?
                    .pad_with_same(3, self.pad, self.pad)?;
                x.conv2d(&self.weight, 0, self.stride, self.dilation, 1)?
            }
        };
        if let Some(c) = &self.counter {
            let (n, co, h, w) = y.dims4()?;
            let k = self.weight.dim(2)? * self.weight.dim(3)?;
            c.add((n * co * h * w * c_in * k) as u64);
        }
        let b = self.bias.reshape((1, self.out_channels(), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// Dense layer `y = x Wᵀ + b` over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = match init {
            Init::FanIn => ps.fan_in(format!("{name}.weight"), &[d_out, d_in], d_in, rng)?,
            Init::Zero => ps.zeros(format!("{name}.weight"), &[d_out, d_in])?,
        };
        let bias = ps.zeros(format!("{name}.bias"), &[d_out])?;
        Ok(Self { weight, bias })
    }

    /// Like [`Linear::new`] with zero weights and a constant bias.
    pub fn with_bias(ps: &mut ParamStore, name: &str, d_in: usize, bias: &[f64]) -> Result<Self> {
        let weight = ps.zeros(format!("{name}.weight"), &[bias.len(), d_in])?;
        let b = Tensor::from_slice(bias, bias.len(), ps.device())?;
        let name = format!("{name}.bias");
        let bias = ps.zeros(name.clone(), &[bias.len()])?;
        ps.assign(&name, &b)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d_in = x.dim(D::Minus1)?;
        if d_in != self.weight.dim(1)? {
            return Err(Error::Shape(format!(
                "linear layer expects width {}, got {d_in}",
                self.weight.dim(1)?
            )));
        }
        let y = match x.rank() {
            2 => x.matmul(&self.weight.t()?)?,
            _ => x.broadcast_matmul(&self.weight.t()?)?,
        };
        Ok(y.broadcast_add(&self.bias)?)
    }
}

/// Group normalization with a learned affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    inner: candle_nn::GroupNorm,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        let weight = ps.constant(format!("{name}.weight"), &[channels], 1.0)?;
        let bias = ps.zeros(format!("{name}.bias"), &[channels])?;
        let inner = candle_nn::GroupNorm::new(weight, bias, channels, groups, 1e-5)?;
        Ok(Self { inner })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_core::Module::forward(&self.inner, x)?)
    }
}

/// Largest group count ≤ `preferred` that divides `channels`.
pub fn group_count(channels: usize, preferred: usize) -> usize {
    (1..=preferred.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// The smooth rectifier used across all networks.
pub fn act(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// Nearest-neighbour ×2 upsampling built from broadcast so it stays
/// differentiable.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .reshape((n, c, 2 * h, 2 * w))?)
}

/// Row-wise softmax composed from primitive ops (keeps a backward pass).
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}
