//! Non-reference underwater quality metrics (UCIQE, UIQM) and evaluation
//! reports.
//!
//! Inputs are RGB images in [0, 255]. The weighting constants are read from
//! `metric_weights.toml`, which cites where each value comes from.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::ImagePlane;

const WEIGHTS_TOML: &str = include_str!("metric_weights.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UciqeWeights {
    pub source: String,
    pub chroma_std: f64,
    pub luminance_contrast: f64,
    pub saturation_mean: f64,
    pub contrast_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UiqmWeights {
    pub source: String,
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
    pub uicm_mean: f64,
    pub uicm_std: f64,
    pub trim_low: f64,
    pub trim_high: f64,
    pub uism_red: f64,
    pub uism_green: f64,
    pub uism_blue: f64,
    pub block: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricWeights {
    pub version: u32,
    pub uciqe: UciqeWeights,
    pub uiqm: UiqmWeights,
}

impl MetricWeights {
    /// The constants shipped with the crate.
    pub fn pinned() -> Self {
        Self::from_toml(WEIGHTS_TOML).expect("bundled metric weights parse")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let w: Self = toml::from_str(text).map_err(|e| Error::Config(format!("metric weights: {e}")))?;
        if w.uiqm.block == 0 {
            return Err(Error::Config("metric block size must be positive".into()));
        }
        Ok(w)
    }
}

fn check_rgb(img: &ImagePlane) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!(
            "quality metrics need 3 channels, got {}",
            img.channels()
        )));
    }
    Ok(())
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412453, 0.357580, 0.180423],
    [0.212671, 0.715160, 0.072169],
    [0.019334, 0.119193, 0.950227],
];

/// CIELab of an sRGB triple in [0, 1]. The reference white is the image of
/// RGB white under the conversion matrix, so neutral colors have zero
/// chroma.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let mut xyz = [0.0; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        let white: f64 = row.iter().sum();
        xyz[i] = row.iter().zip(&lin).map(|(m, c)| m * c).sum::<f64>() / white;
    }
    let f = |t: f64| {
        if t > 0.008856 {
            t.cbrt()
        } else {
            7.787 * t + 16.0 / 116.0
        }
    };
    let (fx, fy, fz) = (f(xyz[0]), f(xyz[1]), f(xyz[2]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// UCIQE component terms: chroma standard deviation, luminance contrast and
/// mean saturation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UciqeTerms {
    pub chroma_std: f64,
    pub luminance_contrast: f64,
    pub saturation_mean: f64,
}

pub fn uciqe_terms(img: &ImagePlane, weights: &UciqeWeights) -> Result<UciqeTerms> {
    check_rgb(img)?;
    let n = img.height() * img.width();
    let mut lum = Vec::with_capacity(n);
    let mut chroma = Vec::with_capacity(n);
    let mut sat = Vec::with_capacity(n);
    for px in img.data().chunks_exact(3) {
        let lab = srgb_to_lab([px[0] as f64 / 255.0, px[1] as f64 / 255.0, px[2] as f64 / 255.0]);
        let l = lab[0] / 100.0;
        let c = (lab[1] / 255.0).hypot(lab[2] / 255.0);
        lum.push(l);
        chroma.push(c);
        sat.push(if l > 0.0 { c / l } else { 0.0 });
    }
    lum.sort_by(f64::total_cmp);
    let tail = ((weights.contrast_fraction * n as f64).round() as usize).clamp(1, n);
    let luminance_contrast = mean(&lum[n - tail..]) - mean(&lum[..tail]);
    Ok(UciqeTerms {
        chroma_std: std_dev(&chroma),
        luminance_contrast,
        saturation_mean: mean(&sat),
    })
}

pub fn uciqe_with(img: &ImagePlane, weights: &UciqeWeights) -> Result<f64> {
    let t = uciqe_terms(img, weights)?;
    Ok(weights.chroma_std * t.chroma_std
        + weights.luminance_contrast * t.luminance_contrast
        + weights.saturation_mean * t.saturation_mean)
}

/// UCIQE with the pinned weights.
pub fn uciqe(img: &ImagePlane) -> Result<f64> {
    uciqe_with(img, &MetricWeights::pinned().uciqe)
}

fn trimmed_stats(mut v: Vec<f64>, low: f64, high: f64) -> (f64, f64) {
    let k = v.len();
    v.sort_by(f64::total_cmp);
    let lo = (low * k as f64).ceil() as usize;
    let hi = (high * k as f64).floor() as usize;
    let kept = &v[lo.min(k)..k.saturating_sub(hi).max(lo.min(k))];
    let mu = if kept.is_empty() { mean(&v) } else { mean(kept) };
    let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / k as f64;
    (mu, var)
}

/// Colorfulness from trimmed red-green and yellow-blue opponent channels.
pub fn uicm(img: &ImagePlane, weights: &UiqmWeights) -> Result<f64> {
    check_rgb(img)?;
    let mut rg = Vec::new();
    let mut yb = Vec::new();
    for px in img.data().chunks_exact(3) {
        let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
        rg.push(r - g);
        yb.push((r + g) / 2.0 - b);
    }
    let (mu_rg, var_rg) = trimmed_stats(rg, weights.trim_low, weights.trim_high);
    let (mu_yb, var_yb) = trimmed_stats(yb, weights.trim_low, weights.trim_high);
    Ok(weights.uicm_mean * mu_rg.hypot(mu_yb) + weights.uicm_std * (var_rg + var_yb).sqrt())
}

/// Sobel gradient magnitude with periodic boundaries.
fn sobel_magnitude(h: usize, w: usize, at: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let px = |y: isize, x: isize| at(y.rem_euclid(h as isize) as usize, x.rem_euclid(w as isize) as usize);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (px(y - 1, x + 1) + 2.0 * px(y, x + 1) + px(y + 1, x + 1))
                - (px(y - 1, x - 1) + 2.0 * px(y, x - 1) + px(y + 1, x - 1));
            let gy = (px(y + 1, x - 1) + 2.0 * px(y + 1, x) + px(y + 1, x + 1))
                - (px(y - 1, x - 1) + 2.0 * px(y - 1, x) + px(y - 1, x + 1));
            out.push(gx.hypot(gy));
        }
    }
    out
}

fn block_grid(img: &ImagePlane, block: usize) -> Result<(usize, usize)> {
    let (k2, k1) = (img.height() / block, img.width() / block);
    if k1 == 0 || k2 == 0 {
        return Err(Error::Shape(format!(
            "image {}x{} is smaller than the {block}x{block} metric block",
            img.height(),
            img.width()
        )));
    }
    Ok((k2, k1))
}

/// Measure of enhancement: `2/(k1·k2) Σ log(max/min)` over blocks, skipping
/// blocks whose extremes vanish.
fn eme(values: &[f64], h: usize, w: usize, block: usize) -> f64 {
    let (k2, k1) = (h / block, w / block);
    let mut acc = 0.0;
    for by in 0..k2 {
        for bx in 0..k1 {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for y in by * block..(by + 1) * block {
                for x in bx * block..(bx + 1) * block {
                    let v = values[y * w + x];
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            if lo > 0.0 && hi > 0.0 {
                acc += (hi / lo).ln();
            }
        }
    }
    2.0 / (k1 * k2) as f64 * acc
}

/// Sharpness: luminance-weighted block EME of each channel's edge map
/// (Sobel magnitude times the channel).
pub fn uism(img: &ImagePlane, weights: &UiqmWeights) -> Result<f64> {
    check_rgb(img)?;
    block_grid(img, weights.block)?;
    let (h, w) = (img.height(), img.width());
    let lambdas = [weights.uism_red, weights.uism_green, weights.uism_blue];
    let mut total = 0.0;
    for (c, lambda) in lambdas.iter().enumerate() {
        let at = |y: usize, x: usize| img.get(y, x, c) as f64;
        let edges = sobel_magnitude(h, w, at);
        let weighted: Vec<f64> = edges
            .iter()
            .enumerate()
            .map(|(i, e)| e * img.data()[i * 3 + c] as f64)
            .collect();
        total += lambda * eme(&weighted, h, w, weights.block);
    }
    Ok(total)
}

/// Contrast: negative mean over blocks of `r·ln r` with the Michelson ratio
/// `r = (max - min)/(max + min)` taken over all channels of the block.
pub fn uiconm(img: &ImagePlane, weights: &UiqmWeights) -> Result<f64> {
    check_rgb(img)?;
    let block = weights.block;
    let (k2, k1) = block_grid(img, block)?;
    let mut acc = 0.0;
    for by in 0..k2 {
        for bx in 0..k1 {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for y in by * block..(by + 1) * block {
                for x in bx * block..(bx + 1) * block {
                    for c in 0..3 {
                        let v = img.get(y, x, c) as f64;
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
            let top = hi - lo;
            let bot = hi + lo;
            if top > 0.0 && bot > 0.0 {
                let r = top / bot;
                acc += r * r.ln();
            }
        }
    }
    Ok(-acc / (k1 * k2) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UiqmTerms {
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
}

pub fn uiqm_terms(img: &ImagePlane, weights: &UiqmWeights) -> Result<UiqmTerms> {
    Ok(UiqmTerms {
        uicm: uicm(img, weights)?,
        uism: uism(img, weights)?,
        uiconm: uiconm(img, weights)?,
    })
}

pub fn uiqm_with(img: &ImagePlane, weights: &UiqmWeights) -> Result<f64> {
    let t = uiqm_terms(img, weights)?;
    Ok(weights.uicm * t.uicm + weights.uism * t.uism + weights.uiconm * t.uiconm)
}

/// UIQM with the pinned weights.
pub fn uiqm(img: &ImagePlane) -> Result<f64> {
    uiqm_with(img, &MetricWeights::pinned().uiqm)
}

/// Scores of one evaluated image. Full-reference columns are absent when no
/// reference was available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub file: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ssim: Option<f64>,
    pub uciqe: f64,
    pub uiqm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregate {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ssim: Option<f64>,
    pub uciqe: f64,
    pub uiqm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub weights_version: u32,
    pub per_image: Vec<MetricRow>,
    pub aggregate: MetricAggregate,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| mean(&v))
}

impl MetricReport {
    pub fn new(per_image: Vec<MetricRow>, weights_version: u32) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Data("no images to report".into()));
        }
        let aggregate = MetricAggregate {
            psnr: mean_of(per_image.iter().map(|r| r.psnr)),
            ssim: mean_of(per_image.iter().map(|r| r.ssim)),
            uciqe: mean(&per_image.iter().map(|r| r.uciqe).collect::<Vec<_>>()),
            uiqm: mean(&per_image.iter().map(|r| r.uiqm).collect::<Vec<_>>()),
        };
        Ok(Self {
            weights_version,
            per_image,
            aggregate,
        })
    }

    fn has_reference(&self) -> bool {
        self.per_image.iter().all(|r| r.psnr.is_some() && r.ssim.is_some())
    }

    /// Comma-separated table with a trailing `mean` row.
    pub fn to_csv(&self) -> String {
        let full = self.has_reference();
        let mut out = String::from(if full { "file,psnr,ssim,uciqe,uiqm\n" } else { "file,uciqe,uiqm\n" });
        let line = |out: &mut String, file: &str, p: Option<f64>, s: Option<f64>, c: f64, q: f64| {
            if full {
                out.push_str(&format!(
                    "{file},{:.6},{:.6},{c:.6},{q:.6}\n",
                    p.unwrap_or(f64::NAN),
                    s.unwrap_or(f64::NAN)
                ));
            } else {
                out.push_str(&format!("{file},{c:.6},{q:.6}\n"));
            }
        };
        for r in &self.per_image {
            line(&mut out, &r.file, r.psnr, r.ssim, r.uciqe, r.uiqm);
        }
        let a = &self.aggregate;
        line(&mut out, "mean", a.psnr, a.ssim, a.uciqe, a.uiqm);
        out
    }

    /// Writes the JSON report to `path` and the table beside it with a
    /// `.csv` extension.
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))?;
        let csv = path.with_extension("csv");
        let mut f = std::fs::File::create(&csv).map_err(|e| Error::io(&csv, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(&csv, e))?;
        Ok(())
    }
}
