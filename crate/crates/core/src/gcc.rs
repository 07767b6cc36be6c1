//! Global color correction of intermediate low-band samples.
//!
//! A condition network (three stride-2 convolutions with 7×7, 3×3, 3×3
//! kernels and 32 channels, then global average pooling) summarizes the
//! sample into a 32-vector. Per modulation block an affine generator maps
//! that vector together with the time embedding to a per-channel scale γ and
//! shift β. A pointwise baseline network of 1×1 convolutions, modulated by
//! `γ·x + β` after each of its first hidden layers, produces a correction
//! that is added to the input sample.

use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::time_embed_batch;
use crate::error::{Error, Result};
use crate::nn::{act, Conv2d, ConvSpec, Init, Linear, Padding, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GccConfig {
    pub channels: usize,
    /// Width of the condition vector.
    pub cond_dim: usize,
    /// Width of the baseline network's hidden 1×1 layers.
    pub base_width: usize,
    /// Hidden 1×1 layers in the baseline network.
    pub base_layers: usize,
    /// Hidden layers followed by a modulation block (the first ones).
    pub fm_blocks: usize,
    pub embed_dim: usize,
}

impl Default for GccConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            cond_dim: 32,
            base_width: 64,
            base_layers: 4,
            fm_blocks: 3,
            embed_dim: 128,
        }
    }
}

impl GccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fm_blocks > self.base_layers || self.base_layers == 0 {
            return Err(Error::Config(format!(
                "GCC needs 1 <= fm_blocks ({}) <= base_layers ({})",
                self.fm_blocks, self.base_layers
            )));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 || self.cond_dim == 0 {
            return Err(Error::Config("GCC widths must be positive, embedding even".into()));
        }
        Ok(())
    }
}

/// Per-channel scale and shift, each `(N, C)`.
#[derive(Debug, Clone)]
pub struct FmParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// `out[n, c, ·, ·] = γ[n, c]·x[n, c, ·, ·] + β[n, c]`.
pub fn fm_apply(x: &Tensor, params: &FmParams) -> Result<Tensor> {
    let (n, c, _, _) = x.dims4()?;
    if params.gamma.dims() != [n, c] || params.beta.dims() != [n, c] {
        return Err(Error::Shape(format!(
            "modulation params {:?}/{:?} do not fit feature {:?}",
            params.gamma.dims(),
            params.beta.dims(),
            x.dims()
        )));
    }
    let g = params.gamma.reshape((n, c, 1, 1))?;
    let b = params.beta.reshape((n, c, 1, 1))?;
    Ok(x.broadcast_mul(&g)?.broadcast_add(&b)?)
}

#[derive(Debug, Clone)]
pub struct GccWeights {
    config: GccConfig,
    cond_convs: Vec<Conv2d>,
    cond_time: Linear,
    generators: Vec<Linear>,
    hidden: Vec<Conv2d>,
    head: Conv2d,
}

impl GccWeights {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        config: &GccConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let k = config.cond_dim;
        let strided = |c_in, kernel| ConvSpec::new(c_in, k, kernel).stride(2).padding(Padding::Replicate);
        let cond_convs = vec![
            Conv2d::new(ps, &format!("{name}.cond0"), strided(c, 7), rng)?,
            Conv2d::new(ps, &format!("{name}.cond1"), strided(k, 3), rng)?,
            Conv2d::new(ps, &format!("{name}.cond2"), strided(k, 3), rng)?,
        ];
        let cond_time = Linear::new(ps, &format!("{name}.cond_time"), config.embed_dim, k, Init::FanIn, rng)?;
        let w = config.base_width;
        let identity_affine: Vec<f64> = std::iter::repeat_n(1.0, w).chain(std::iter::repeat_n(0.0, w)).collect();
        let generators = (0..config.fm_blocks)
            .map(|i| Linear::with_bias(ps, &format!("{name}.fm{i}"), k + config.embed_dim, &identity_affine))
            .collect::<Result<_>>()?;
        let hidden = (0..config.base_layers)
            .map(|i| {
                let c_in = if i == 0 { c } else { w };
                Conv2d::new(ps, &format!("{name}.base{i}"), ConvSpec::new(c_in, w, 1), rng)
            })
            .collect::<Result<_>>()?;
        let head = Conv2d::new(ps, &format!("{name}.head"), ConvSpec::new(w, c, 1).zero_init(), rng)?;
        Ok(Self {
            config: config.clone(),
            cond_convs,
            cond_time,
            generators,
            hidden,
            head,
        })
    }

    pub fn config(&self) -> &GccConfig {
        &self.config
    }
}

/// Global condition vector `(N, cond_dim)` for `x` and its time embedding
/// `t_embed` `(N, embed_dim)`.
pub fn condition_encode(x: &Tensor, t_embed: &Tensor, weights: &GccWeights) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    if c != weights.config.channels {
        return Err(Error::Shape(format!(
            "GCC expects {} channels, got {c}",
            weights.config.channels
        )));
    }
    if h < 8 || w < 8 {
        return Err(Error::Shape(format!(
            "condition network needs at least 8x8 input, got {h}x{w}"
        )));
    }
    let mut f = x.clone();
    for conv in &weights.cond_convs {
        f = act(&conv.forward(&f)?)?;
    }
    let pooled = f.mean(D::Minus1)?.mean(D::Minus1)?;
    Ok((pooled + weights.cond_time.forward(t_embed)?)?)
}

/// Affine parameters for every modulation block.
pub fn modulation_params(cond: &Tensor, t_embed: &Tensor, weights: &GccWeights) -> Result<Vec<FmParams>> {
    let input = Tensor::cat(&[cond, t_embed], 1)?;
    let w = weights.config.base_width;
    weights
        .generators
        .iter()
        .map(|g| {
            let out = g.forward(&input)?;
            Ok(FmParams {
                gamma: out.narrow(1, 0, w)?,
                beta: out.narrow(1, w, w)?,
            })
        })
        .collect()
}

/// The pointwise baseline network with fixed modulation parameters.
pub fn baseline_forward(x: &Tensor, fm: &[FmParams], weights: &GccWeights) -> Result<Tensor> {
    if fm.len() != weights.generators.len() {
        return Err(Error::Shape(format!(
            "{} modulation blocks expected, got {}",
            weights.generators.len(),
            fm.len()
        )));
    }
    let mut h = x.clone();
    for (i, conv) in weights.hidden.iter().enumerate() {
        h = conv.forward(&h)?;
        if let Some(p) = fm.get(i) {
            h = fm_apply(&h, p)?;
        }
        h = act(&h)?;
    }
    Ok((x + weights.head.forward(&h)?)?)
}

/// Color-corrects the low-band sample `x_low` at reverse timestep `t`.
pub fn gcc_forward(x_low: &Tensor, t: usize, weights: &GccWeights) -> Result<Tensor> {
    gcc_forward_batch(x_low, &vec![t; x_low.dim(0)?], weights)
}

/// [`gcc_forward`] with one timestep per batch item.
pub fn gcc_forward_batch(x_low: &Tensor, ts: &[usize], weights: &GccWeights) -> Result<Tensor> {
    if ts.len() != x_low.dim(0)? {
        return Err(Error::Shape(format!(
            "{} timesteps for a batch of {}",
            ts.len(),
            x_low.dim(0)?
        )));
    }
    let temb = time_embed_batch(ts, weights.config.embed_dim, x_low.dtype(), x_low.device())?;
    let cond = condition_encode(x_low, &temb, weights)?;
    let fm = modulation_params(&cond, &temb, weights)?;
    baseline_forward(x_low, &fm, weights)
}
