//! Noise schedule, closed-form forward noising and the skip-sampled reverse
//! update applied to the low-frequency band.

use candle_core::{DType, Device, Shape, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-timestep β, α = 1 − β and ᾱ = Π α tables. Timesteps are 1-based;
/// `alpha_bar(0)` is defined as 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear β schedule from `beta_start` to `beta_end` over `steps` timesteps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("diffusion needs at least one timestep".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "beta range must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0f64, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Timestep {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alphas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Ordered `(t, t_prev)` pairs visited by the skip sampler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeGrid {
    pairs: Vec<(usize, usize)>,
}

impl TimeGrid {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Timestep at which the initial Gaussian sample is placed.
    pub fn start(&self) -> usize {
        self.pairs[0].0
    }
}

/// `S` evenly strided reverse steps: `t = (i-1)·T/S + 1`,
/// `t_prev = (i-2)·T/S + 1` (or 0 on the final step), for `i = S..1`.
pub fn skip_grid(steps: usize, samples: usize) -> Result<TimeGrid> {
    if samples == 0 {
        return Err(Error::Config("sampling steps must be at least 1".into()));
    }
    if steps % samples != 0 {
        return Err(Error::Config(format!(
            "diffusion steps {steps} are not divisible by sampling steps {samples}"
        )));
    }
    let stride = steps / samples;
    let pairs = (1..=samples)
        .rev()
        .map(|i| {
            let t = (i - 1) * stride + 1;
            let prev = if i > 1 { (i - 2) * stride + 1 } else { 0 };
            (t, prev)
        })
        .collect();
    Ok(TimeGrid { pairs })
}

/// Reverse-step noise handling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Adds `σ·z` with fresh `z ~ N(0, I)`.
    #[default]
    Stochastic,
    /// Uses the posterior mean only.
    Deterministic,
}

/// Standard-normal tensor drawn from `rng`.
pub fn gaussian<R: Rng + ?Sized>(
    rng: &mut R,
    shape: impl Into<Shape>,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let shape = shape.into();
    let data: Vec<f64> = (0..shape.elem_count())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

/// Broadcastable per-item coefficient column of shape `(N, 1, 1, 1)`.
fn coeff(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let n = like.dim(0)?;
    let col = match values.len() {
        1 => vec![values[0]; n],
        len if len == n => values.to_vec(),
        len => {
            return Err(Error::Shape(format!(
                "{len} timesteps for a batch of {n}"
            )))
        }
    };
    Ok(Tensor::from_vec(col, (n, 1, 1, 1), like.device())?.to_dtype(like.dtype())?)
}

/// `√ᾱₜ·x₀ + √(1−ᾱₜ)·ε`. `ts` holds one timestep for the whole batch or one
/// per batch item.
pub fn q_sample(x0: &Tensor, ts: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        return Err(Error::Shape(format!(
            "x0 {:?} vs eps {:?}",
            x0.dims(),
            eps.dims()
        )));
    }
    let mut signal = Vec::with_capacity(ts.len());
    let mut noise = Vec::with_capacity(ts.len());
    for &t in ts {
        sched.check(t)?;
        let ab = sched.alpha_bar(t)?;
        signal.push(ab.sqrt());
        noise.push((1.0 - ab).sqrt());
    }
    let a = x0.broadcast_mul(&coeff(&signal, x0)?)?;
    let b = eps.broadcast_mul(&coeff(&noise, eps)?)?;
    Ok((a + b)?)
}

/// `(xₜ − √(1−ᾱₜ)·ε̂)/√ᾱₜ`, the inverse of [`q_sample`].
pub fn predict_x0(
    x_t: &Tensor,
    eps_hat: &Tensor,
    ts: &[usize],
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let mut inv_signal = Vec::with_capacity(ts.len());
    let mut noise = Vec::with_capacity(ts.len());
    for &t in ts {
        sched.check(t)?;
        let ab = sched.alpha_bar(t)?;
        inv_signal.push(1.0 / ab.sqrt());
        noise.push((1.0 - ab).sqrt());
    }
    let centered = (x_t - eps_hat.broadcast_mul(&coeff(&noise, eps_hat)?)?)?;
    Ok(centered.broadcast_mul(&coeff(&inv_signal, x_t)?)?)
}

/// Scalars of one reverse update: `x_prev = mean_scale·(xₜ − eps_scale·ε̂) + σ·z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub mean_scale: f64,
    pub eps_scale: f64,
    pub sigma: f64,
}

pub fn step_coefficients(sched: &NoiseSchedule, t: usize, t_prev: usize) -> Result<StepCoefficients> {
    sched.check(t)?;
    if t_prev >= t {
        return Err(Error::Config(format!(
            "reverse step needs t_prev < t, got ({t}, {t_prev})"
        )));
    }
    let alpha = sched.alpha(t)?;
    let ab = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    let var = (1.0 - alpha) * (1.0 - ab_prev) / (1.0 - ab);
    Ok(StepCoefficients {
        mean_scale: 1.0 / alpha.sqrt(),
        eps_scale: (1.0 - alpha) / (1.0 - ab).sqrt(),
        sigma: var.max(0.0).sqrt(),
    })
}

/// One reverse update from `t` to `t_prev`.
pub fn p_step<R: Rng + ?Sized>(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    mode: SamplingMode,
    rng: &mut R,
) -> Result<Tensor> {
    if x_t.dims() != eps_hat.dims() {
        return Err(Error::Shape(format!(
            "x_t {:?} vs eps_hat {:?}",
            x_t.dims(),
            eps_hat.dims()
        )));
    }
    let c = step_coefficients(sched, t, t_prev)?;
    let mean = ((x_t - (eps_hat * c.eps_scale)?)? * c.mean_scale)?;
    let out = if mode == SamplingMode::Stochastic && t_prev > 0 && c.sigma > 0.0 {
        let z = gaussian(rng, x_t.shape().clone(), x_t.dtype(), x_t.device())?;
        (mean + (z * c.sigma)?)?
    } else {
        mean
    };
    Ok(out)
}
