//! Training losses and full-reference image metrics.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::ImagePlane;
use crate::wavelet::HighFreqTriplet;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
pub const PSNR_CAP_DB: f64 = 100.0;

/// How squared errors are reduced to a scalar.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn apply(self, t: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Reduction::Mean => t.mean_all()?,
            Reduction::Sum => t.sum_all()?,
        })
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Squared error between true and predicted noise.
pub fn loss_noise(eps_true: &Tensor, eps_pred: &Tensor, reduction: Reduction) -> Result<Tensor> {
    same_shape(eps_true, eps_pred, "noise loss")?;
    reduction.apply(&(eps_true - eps_pred)?.sqr()?)
}

/// Sum over levels of the squared error between refined and reference
/// high-frequency triplets.
pub fn loss_details(
    refined: &[HighFreqTriplet],
    reference: &[HighFreqTriplet],
    reduction: Reduction,
) -> Result<Tensor> {
    if refined.len() != reference.len() {
        return Err(Error::Shape(format!(
            "detail loss: {} refined levels vs {} reference levels",
            refined.len(),
            reference.len()
        )));
    }
    if refined.is_empty() {
        return Err(Error::Shape("detail loss needs at least one level".into()));
    }
    let mut total: Option<Tensor> = None;
    for (r, g) in refined.iter().zip(reference) {
        let (r, g) = (r.concat()?, g.concat()?);
        same_shape(&r, &g, "detail loss")?;
        let term = reduction.apply(&(r - g)?.sqr()?)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

fn gaussian_taps(dtype: DType, device: &Device) -> Result<Tensor> {
    let c = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    let taps: Vec<f64> = raw.iter().map(|v| v / s).collect();
    Ok(Tensor::new(taps.as_slice(), device)?.to_dtype(dtype)?)
}

/// Mean structural similarity of two `(N, C, H, W)` tensors holding values
/// in [-1, 1], evaluated on [0, 1] with an 11×11 Gaussian window (σ = 1.5)
/// over the valid region and averaged over channels and images.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "ssim")?;
    let (n, c, h, w) = a.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let x = ((a + 1.0)? * 0.5)?.reshape((n * c, 1, h, w))?;
    let y = ((b + 1.0)? * 0.5)?.reshape((n * c, 1, h, w))?;
    let stack = Tensor::cat(&[&x, &y, &x.sqr()?, &y.sqr()?, &(&x * &y)?], 0)?;
    let taps = gaussian_taps(a.dtype(), a.device())?;
    let row = taps.reshape((1, 1, 1, SSIM_WINDOW))?;
    let col = taps.reshape((1, 1, SSIM_WINDOW, 1))?;
    let filtered = stack.conv2d(&row, 0, 1, 1, 1)?.conv2d(&col, 0, 1, 1, 1)?;
    let m = n * c;
    let part = |i: usize| filtered.narrow(0, i * m, m);
    let (mu_x, mu_y) = (part(0)?, part(1)?);
    let mu_xx = mu_x.sqr()?;
    let mu_yy = mu_y.sqr()?;
    let mu_xy = (&mu_x * &mu_y)?;
    let var_x = (part(2)? - &mu_xx)?;
    let var_y = (part(3)? - &mu_yy)?;
    let cov = (part(4)? - &mu_xy)?;
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let num = ((mu_xy * 2.0)? + c1)?.mul(&((cov * 2.0)? + c2)?)?;
    let den = ((mu_xx + mu_yy)? + c1)?.mul(&((var_x + var_y)? + c2)?)?;
    Ok((num / den)?.mean_all()?)
}

/// Mean absolute error plus `1 - ssim` between restored and reference low
/// bands (both in [-1, 1]).
pub fn loss_content(restored: &Tensor, reference: &Tensor) -> Result<Tensor> {
    same_shape(restored, reference, "content loss")?;
    let l1 = (restored - reference)?.abs()?.mean_all()?;
    let s = ssim(restored, reference)?;
    Ok(((l1 - s)? + 1.0)?)
}

/// The three loss terms and their weighted total, as scalar tensors that
/// stay attached to the autograd graph.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub noise: Tensor,
    pub details: Tensor,
    pub content: Tensor,
    pub total: Tensor,
}

/// Plain-number view of a [`LossBreakdown`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub noise: f64,
    pub details: f64,
    pub content: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn values(&self) -> Result<LossValues> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossValues {
            noise: f(&self.noise)?,
            details: f(&self.details)?,
            content: f(&self.content)?,
            total: f(&self.total)?,
        })
    }
}

/// `total = noise + λ·details + content`.
pub fn loss_total(noise: Tensor, details: Tensor, content: Tensor, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("detail weight must be >= 0, got {lambda}")));
    }
    let total = ((&noise + (&details * lambda)?)? + &content)?;
    Ok(LossBreakdown {
        noise,
        details,
        content,
        total,
    })
}

fn check_planes(a: &ImagePlane, b: &ImagePlane) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "images differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB, `cap` when the images are identical.
pub fn psnr_capped(a: &ImagePlane, b: &ImagePlane, peak: f64, cap: f64) -> Result<f64> {
    check_planes(a, b)?;
    if !(peak > 0.0) {
        return Err(Error::Config(format!("psnr peak must be positive, got {peak}")));
    }
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(cap))
}

/// PSNR with the default 100 dB cap.
pub fn psnr(a: &ImagePlane, b: &ImagePlane, peak: f64) -> Result<f64> {
    psnr_capped(a, b, peak, PSNR_CAP_DB)
}

/// SSIM of two [0, 255] images.
pub fn ssim_planes(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    check_planes(a, b)?;
    let ta = a.normalized().to_tensor(DType::F64, &Device::Cpu)?;
    let tb = b.normalized().to_tensor(DType::F64, &Device::Cpu)?;
    Ok(ssim(&ta, &tb)?.to_scalar::<f64>()?)
}
