//! Noise-estimation network over the coarsest wavelet band.
//!
//! A small U-Net: `scales` resolutions, `blocks_per_scale` residual blocks
//! each, skip concatenation between matching resolutions, group
//! normalization inside blocks and a sinusoidal time embedding injected into
//! every residual block. The network input is `x_t ‖ cond_low ‖ cond_high`
//! (3 + 3 + 9 = 15 channels for RGB).

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{act, group_count, upsample2, Conv2d, ConvSpec, GroupNorm, Init, Linear, MacCounter, ParamStore};

/// Sinusoidal embedding `[sin(t/ω_j) …, cos(t/ω_j) …]` with
/// `ω_j = 10000^(j/(dim/2))`.
pub fn time_embed(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "time embedding width must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|j| 10000f64.powf(-(j as f64) / half as f64))
        .collect();
    let t = t as f64;
    let mut out: Vec<f64> = freqs.iter().map(|f| (t * f).sin()).collect();
    out.extend(freqs.iter().map(|f| (t * f).cos()));
    Ok(out)
}

/// `(N, dim)` embedding table for a batch of timesteps.
pub fn time_embed_batch(ts: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        rows.extend(time_embed(t, dim)?);
    }
    Ok(Tensor::from_vec(rows, (ts.len(), dim), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub channel_mult: Vec<usize>,
    pub blocks_per_scale: usize,
    pub embed_dim: usize,
    pub groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            in_channels: 15,
            out_channels: 3,
            base_width: 64,
            channel_mult: vec![1, 2, 2],
            blocks_per_scale: 2,
            embed_dim: 128,
            groups: 8,
        }
    }
}

impl DenoiserConfig {
    pub fn scales(&self) -> usize {
        self.channel_mult.len()
    }

    /// Spatial dims of the network input must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.scales().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return Err(Error::Config("channel multipliers must be non-empty and positive".into()));
        }
        if self.base_width == 0 || self.blocks_per_scale == 0 {
            return Err(Error::Config("denoiser width and depth must be positive".into()));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(Error::Config("embedding width must be even".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        temb_dim: usize,
        groups: usize,
        counter: &MacCounter,
        rng: &mut R,
    ) -> Result<Self> {
        let skip = if c_in != c_out {
            Some(Conv2d::new(ps, &format!("{name}.skip"), ConvSpec::new(c_in, c_out, 1), rng)?.with_counter(counter))
        } else {
            None
        };
        Ok(Self {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), c_in, group_count(c_in, groups))?,
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), ConvSpec::new(c_in, c_out, 3), rng)?
                .with_counter(counter),
            temb: Linear::new(ps, &format!("{name}.temb"), temb_dim, c_out, Init::FanIn, rng)?,
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), c_out, group_count(c_out, groups))?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), ConvSpec::new(c_out, c_out, 3), rng)?
                .with_counter(counter),
            skip,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&act(&self.norm1.forward(x)?)?)?;
        let (n, c, _, _) = h.dims4()?;
        let t = self.temb.forward(temb)?.reshape((n, c, 1, 1))?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&act(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

#[derive(Debug, Clone)]
struct DownScale {
    blocks: Vec<ResBlock>,
    down: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct UpScale {
    blocks: Vec<ResBlock>,
    up: Option<Conv2d>,
}

/// Noise-estimation network weights.
#[derive(Debug, Clone)]
pub struct DenoiserWeights {
    config: DenoiserConfig,
    temb1: Linear,
    temb2: Linear,
    conv_in: Conv2d,
    down: Vec<DownScale>,
    mid: ResBlock,
    up: Vec<UpScale>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    macs: MacCounter,
    calls: Arc<AtomicU64>,
}

/// Arguments of one noise prediction.
#[derive(Debug, Clone)]
pub struct DenoiserInput {
    /// Noisy low band, `(N, 3, h, w)`.
    pub x_t: Tensor,
    /// Degraded low band, `(N, 3, h, w)`.
    pub cond_low: Tensor,
    /// Refined detail bands `v ‖ h ‖ d`, `(N, 9, h, w)`.
    pub cond_high: Tensor,
    /// One timestep per batch item, or a single shared timestep.
    pub ts: Vec<usize>,
}

impl DenoiserWeights {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        config: &DenoiserConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let macs = MacCounter::default();
        let hidden = 4 * config.base_width;
        let widths: Vec<usize> = config.channel_mult.iter().map(|m| m * config.base_width).collect();
        let g = config.groups;
        let temb1 = Linear::new(ps, &format!("{name}.temb1"), config.embed_dim, hidden, Init::FanIn, rng)?;
        let temb2 = Linear::new(ps, &format!("{name}.temb2"), hidden, hidden, Init::FanIn, rng)?;
        let conv_in = Conv2d::new(
            ps,
            &format!("{name}.conv_in"),
            ConvSpec::new(config.in_channels, widths[0], 3),
            rng,
        )?
        .with_counter(&macs);

        let mut down = Vec::new();
        let mut ch = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..config.blocks_per_scale {
                blocks.push(ResBlock::new(ps, &format!("{name}.down{i}.block{b}"), ch, w, hidden, g, &macs, rng)?);
                ch = w;
            }
            let d = if i + 1 < widths.len() {
                Some(
                    Conv2d::new(ps, &format!("{name}.down{i}.down"), ConvSpec::new(w, w, 3).stride(2), rng)?
                        .with_counter(&macs),
                )
            } else {
                None
            };
            down.push(DownScale { blocks, down: d });
        }
        let mid = ResBlock::new(ps, &format!("{name}.mid"), ch, ch, hidden, g, &macs, rng)?;

        let mut up = Vec::new();
        for (i, &w) in widths.iter().enumerate().rev() {
            let mut blocks = Vec::new();
            for b in 0..config.blocks_per_scale {
                let c_in = if b == 0 { ch + w } else { w };
                blocks.push(ResBlock::new(ps, &format!("{name}.up{i}.block{b}"), c_in, w, hidden, g, &macs, rng)?);
                ch = w;
            }
            let u = if i > 0 {
                Some(
                    Conv2d::new(ps, &format!("{name}.up{i}.up"), ConvSpec::new(w, w, 3), rng)?
                        .with_counter(&macs),
                )
            } else {
                None
            };
            up.push(UpScale { blocks, up: u });
        }
        let norm_out = GroupNorm::new(ps, &format!("{name}.norm_out"), ch, group_count(ch, g))?;
        let conv_out = Conv2d::new(
            ps,
            &format!("{name}.conv_out"),
            ConvSpec::new(ch, config.out_channels, 3).zero_init(),
            rng,
        )?
        .with_counter(&macs);
        Ok(Self {
            config: config.clone(),
            temb1,
            temb2,
            conv_in,
            down,
            mid,
            up,
            norm_out,
            conv_out,
            macs,
            calls: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Convolution multiply-accumulates since the last reset.
    pub fn macs(&self) -> &MacCounter {
        &self.macs
    }

    /// Forward passes since the last [`DenoiserWeights::reset_calls`].
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    fn forward(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let n = x.dim(0)?;
        let ts: Vec<usize> = match ts.len() {
            1 => vec![ts[0]; n],
            len if len == n => ts.to_vec(),
            len => return Err(Error::Shape(format!("{len} timesteps for a batch of {n}"))),
        };
        let temb = time_embed_batch(&ts, self.config.embed_dim, x.dtype(), x.device())?;
        let temb = self.temb2.forward(&act(&self.temb1.forward(&temb)?)?)?;
        let temb = act(&temb)?;

        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for scale in &self.down {
            for block in &scale.blocks {
                h = block.forward(&h, &temb)?;
            }
            skips.push(h.clone());
            if let Some(d) = &scale.down {
                h = d.forward(&h)?;
            }
        }
        h = self.mid.forward(&h, &temb)?;
        for scale in &self.up {
            let skip = skips.pop().expect("one skip per scale");
            h = Tensor::cat(&[&h, &skip], 1)?;
            for block in &scale.blocks {
                h = block.forward(&h, &temb)?;
            }
            if let Some(u) = &scale.up {
                h = u.forward(&upsample2(&h)?)?;
            }
        }
        self.conv_out.forward(&act(&self.norm_out.forward(&h)?)?)
    }
}

/// Predicts the noise in `input.x_t`.
pub fn eps_predict(input: &DenoiserInput, weights: &DenoiserWeights) -> Result<Tensor> {
    let dims = input.x_t.dims4()?;
    for (name, t) in [("cond_low", &input.cond_low), ("cond_high", &input.cond_high)] {
        let (n, _, h, w) = t.dims4()?;
        if (n, h, w) != (dims.0, dims.2, dims.3) {
            return Err(Error::Shape(format!(
                "{name} {:?} does not match x_t {:?}",
                t.dims(),
                input.x_t.dims()
            )));
        }
    }
    let x = Tensor::cat(&[&input.x_t, &input.cond_low, &input.cond_high], 1)?;
    let c = x.dim(1)?;
    if c != weights.config.in_channels {
        return Err(Error::Shape(format!(
            "denoiser expects {} input channels, got {c}",
            weights.config.in_channels
        )));
    }
    let m = weights.config.spatial_multiple();
    if dims.2 % m != 0 {
        return Err(Error::Dimension {
            axis: "height",
            size: dims.2,
            divisor: m,
        });
    }
    if dims.3 % m != 0 {
        return Err(Error::Dimension {
            axis: "width",
            size: dims.3,
            divisor: m,
        });
    }
    weights.forward(&x, &input.ts)
}
