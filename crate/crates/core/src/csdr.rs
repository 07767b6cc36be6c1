//! Cross-spectral detail refinement of the high-frequency triplets.
//!
//! Per wavelet level, each of the `v`, `h`, `d` bands is lifted to an
//! internal width by a 3×3 + 1×1 branch. Two cross-attention blocks take
//! queries from the `v` and `h` features and keys/values from the `d`
//! feature; their outputs are concatenated, projected by a 1×1 conv and
//! added to the `d` feature. All three features then pass a dilated
//! 3×3 stack (rates 1, 2, 3, 2, 1) and a 3×3 + 1×1 output branch back to
//! the image channel count. With `residual` on, the input band is added to
//! the output, so zero-initialized output heads start as the identity.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use crate::wavelet::HighFreqTriplet;

use crate::error::{Error, Result};
use crate::nn::{act, softmax_rows, Conv2d, ConvSpec, Init, Linear, ParamStore};

pub const DILATION_RATES: [usize; 5] = [1, 2, 3, 2, 1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsdrConfig {
    /// Channels of each input band.
    pub channels: usize,
    /// Internal feature width `C_int`.
    pub internal: usize,
    /// Query/key/value width `d_x`.
    pub key_dim: usize,
    pub residual: bool,
    /// Longest attention sequence processed in one piece.
    pub attention_cap: usize,
    /// Tile side used once the cap is exceeded.
    pub tile: usize,
}

impl Default for CsdrConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            internal: 64,
            key_dim: 64,
            residual: true,
            attention_cap: 4096,
            tile: 64,
        }
    }
}

impl CsdrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.internal == 0 {
            return Err(Error::Config("CSDR widths must be positive".into()));
        }
        if self.key_dim == 0 {
            return Err(Error::Config("attention key dimension must be positive".into()));
        }
        if self.tile == 0 || self.attention_cap == 0 {
            return Err(Error::Config("attention tiling sizes must be positive".into()));
        }
        Ok(())
    }
}

/// `(N, C, H, W)` → `(N, H·W, C)`.
fn to_sequence(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Learned query/key/value projections of one cross-attention block.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    key_dim: usize,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        width: usize,
        key_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if key_dim == 0 {
            return Err(Error::Config("attention key dimension must be positive".into()));
        }
        Ok(Self {
            query: Linear::new(ps, &format!("{name}.query"), width, key_dim, Init::FanIn, rng)?,
            key: Linear::new(ps, &format!("{name}.key"), width, key_dim, Init::FanIn, rng)?,
            value: Linear::new(ps, &format!("{name}.value"), width, key_dim, Init::FanIn, rng)?,
            key_dim,
        })
    }

    pub fn key_dim(&self) -> usize {
        self.key_dim
    }

    /// Row-stochastic attention matrix `softmax(QKᵀ/√d_x)`, shape `(N, L, L)`.
    pub fn weights(&self, q_source: &Tensor, kv_source: &Tensor) -> Result<Tensor> {
        check_pair(q_source, kv_source)?;
        let q = self.query.forward(&to_sequence(q_source)?)?;
        let k = self.key.forward(&to_sequence(kv_source)?)?;
        let scores = (q.matmul(&k.t()?)? / (self.key_dim as f64).sqrt())?;
        softmax_rows(&scores)
    }

    fn attend(&self, q_source: &Tensor, kv_source: &Tensor) -> Result<Tensor> {
        let (n, _, h, w) = q_source.dims4()?;
        let a = self.weights(q_source, kv_source)?;
        let v = self.value.forward(&to_sequence(kv_source)?)?;
        let out = a.matmul(&v)?;
        Ok(out.transpose(1, 2)?.reshape((n, self.key_dim, h, w))?)
    }
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    let (_, _, ha, wa) = a.dims4()?;
    let (_, _, hb, wb) = b.dims4()?;
    if a.dim(0)? != b.dim(0)? || (ha, wa) != (hb, wb) {
        return Err(Error::Shape(format!(
            "cross-attention sources differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Cross-attention over flattened spatial positions. Inputs longer than
/// `cap` positions are split into `tile × tile` windows that attend
/// independently.
pub fn cross_attention(
    q_source: &Tensor,
    kv_source: &Tensor,
    params: &CrossAttention,
    cap: usize,
    tile: usize,
) -> Result<Tensor> {
    check_pair(q_source, kv_source)?;
    let (_, _, h, w) = q_source.dims4()?;
    if h * w <= cap || (h <= tile && w <= tile) {
        return params.attend(q_source, kv_source);
    }
    let mut rows = Vec::new();
    for top in (0..h).step_by(tile) {
        let th = tile.min(h - top);
        let mut cols = Vec::new();
        for left in (0..w).step_by(tile) {
            let tw = tile.min(w - left);
            let q = q_source.narrow(2, top, th)?.narrow(3, left, tw)?;
            let kv = kv_source.narrow(2, top, th)?.narrow(3, left, tw)?;
            cols.push(params.attend(&q, &kv)?);
        }
        rows.push(Tensor::cat(&cols, 3)?);
    }
    Ok(Tensor::cat(&rows, 2)?)
}

/// Five same-padded dilated 3×3 convolutions, each followed by the
/// activation.
#[derive(Debug, Clone)]
pub struct DilatedStack {
    convs: Vec<Conv2d>,
    width: usize,
}

impl DilatedStack {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let convs = DILATION_RATES
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                Conv2d::new(
                    ps,
                    &format!("{name}.{i}"),
                    ConvSpec::new(width, width, 3).dilation(d),
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { convs, width })
    }

    /// Receptive field along each axis: `1 + 2·Σ rates`.
    pub fn receptive_field() -> usize {
        1 + 2 * DILATION_RATES.iter().sum::<usize>()
    }
}

pub fn dilated_stack(x: &Tensor, params: &DilatedStack) -> Result<Tensor> {
    let c = x.dim(1)?;
    if c != params.width {
        return Err(Error::Shape(format!(
            "dilated stack expects {} channels, got {c}",
            params.width
        )));
    }
    let mut h = x.clone();
    for conv in &params.convs {
        h = act(&conv.forward(&h)?)?;
    }
    Ok(h)
}

/// 3×3 conv, activation, 1×1 conv.
#[derive(Debug, Clone)]
struct Branch {
    spatial: Conv2d,
    point: Conv2d,
}

impl Branch {
    fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let spatial = Conv2d::new(ps, &format!("{name}.spatial"), ConvSpec::new(c_in, c_out, 3), rng)?;
        let point = Conv2d::new(ps, &format!("{name}.point"), ConvSpec::new(c_out, c_out, 1), rng)?;
        Ok(Self { spatial, point })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.point.forward(&act(&self.spatial.forward(x)?)?)
    }
}

/// Output branch whose 1×1 head maps back to the band channel count.
#[derive(Debug, Clone)]
struct OutBranch {
    spatial: Conv2d,
    point: Conv2d,
}

impl OutBranch {
    fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        width: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            spatial: Conv2d::new(ps, &format!("{name}.spatial"), ConvSpec::new(width, width, 3), rng)?,
            point: Conv2d::new(
                ps,
                &format!("{name}.point"),
                ConvSpec::new(width, channels, 1).zero_init(),
                rng,
            )?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.point.forward(&act(&self.spatial.forward(x)?)?)
    }
}

/// Weights refining one wavelet level.
#[derive(Debug, Clone)]
pub struct CsdrWeights {
    config: CsdrConfig,
    in_v: Branch,
    in_h: Branch,
    in_d: Branch,
    attn_vd: CrossAttention,
    attn_hd: CrossAttention,
    fuse: Conv2d,
    dil_v: DilatedStack,
    dil_h: DilatedStack,
    dil_d: DilatedStack,
    out_v: OutBranch,
    out_h: OutBranch,
    out_d: OutBranch,
}

impl CsdrWeights {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        config: &CsdrConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (c, w, dx) = (config.channels, config.internal, config.key_dim);
        Ok(Self {
            in_v: Branch::new(ps, &format!("{name}.in_v"), c, w, rng)?,
            in_h: Branch::new(ps, &format!("{name}.in_h"), c, w, rng)?,
            in_d: Branch::new(ps, &format!("{name}.in_d"), c, w, rng)?,
            attn_vd: CrossAttention::new(ps, &format!("{name}.attn_vd"), w, dx, rng)?,
            attn_hd: CrossAttention::new(ps, &format!("{name}.attn_hd"), w, dx, rng)?,
            fuse: Conv2d::new(ps, &format!("{name}.fuse"), ConvSpec::new(2 * dx, w, 1), rng)?,
            dil_v: DilatedStack::new(ps, &format!("{name}.dil_v"), w, rng)?,
            dil_h: DilatedStack::new(ps, &format!("{name}.dil_h"), w, rng)?,
            dil_d: DilatedStack::new(ps, &format!("{name}.dil_d"), w, rng)?,
            out_v: OutBranch::new(ps, &format!("{name}.out_v"), w, c, rng)?,
            out_h: OutBranch::new(ps, &format!("{name}.out_h"), w, c, rng)?,
            out_d: OutBranch::new(ps, &format!("{name}.out_d"), w, c, rng)?,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &CsdrConfig {
        &self.config
    }

    pub fn attention_vd(&self) -> &CrossAttention {
        &self.attn_vd
    }

    pub fn attention_hd(&self) -> &CrossAttention {
        &self.attn_hd
    }
}

pub fn csdr_forward(triplet: &HighFreqTriplet, weights: &CsdrWeights) -> Result<HighFreqTriplet> {
    let cfg = &weights.config;
    let c = triplet.v.dim(1)?;
    if c != cfg.channels {
        return Err(Error::Shape(format!(
            "CSDR expects {} channels per band, got {c}",
            cfg.channels
        )));
    }
    let fv = weights.in_v.forward(&triplet.v)?;
    let fh = weights.in_h.forward(&triplet.h)?;
    let fd = weights.in_d.forward(&triplet.d)?;
    let f_vd = cross_attention(&fv, &fd, &weights.attn_vd, cfg.attention_cap, cfg.tile)?;
    let f_hd = cross_attention(&fh, &fd, &weights.attn_hd, cfg.attention_cap, cfg.tile)?;
    let fused = (&fd + weights.fuse.forward(&Tensor::cat(&[&f_vd, &f_hd], 1)?)?)?;
    let v = weights.out_v.forward(&dilated_stack(&fv, &weights.dil_v)?)?;
    let h = weights.out_h.forward(&dilated_stack(&fh, &weights.dil_h)?)?;
    let d = weights.out_d.forward(&dilated_stack(&fused, &weights.dil_d)?)?;
    if cfg.residual {
        HighFreqTriplet::new((v + &triplet.v)?, (h + &triplet.h)?, (d + &triplet.d)?)
    } else {
        HighFreqTriplet::new(v, h, d)
    }
}

/// One independently weighted refinement block per wavelet level.
#[derive(Debug, Clone)]
pub struct Csdr {
    levels: Vec<CsdrWeights>,
}

impl Csdr {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        levels: usize,
        config: &CsdrConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let levels = (0..levels)
            .map(|k| CsdrWeights::new(ps, &format!("{name}.level{}", k + 1), config, rng))
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[CsdrWeights] {
        &self.levels
    }

    /// Refines `highs[k]` with the weights of level `k + 1`.
    pub fn forward(&self, highs: &[HighFreqTriplet]) -> Result<Vec<HighFreqTriplet>> {
        if highs.len() != self.levels.len() {
            return Err(Error::Shape(format!(
                "CSDR built for {} levels, got {}",
                self.levels.len(),
                highs.len()
            )));
        }
        highs
            .iter()
            .zip(&self.levels)
            .map(|(t, w)| csdr_forward(t, w))
            .collect()
    }
}
