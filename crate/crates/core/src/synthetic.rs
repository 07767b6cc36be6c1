//! Procedural scenes and underwater-style degradations for smoke tests and
//! demos that must run without a downloaded dataset.
//!
//! Degradation follows the usual image formation model
//! `I = J·t + B·(1 - t)` with per-channel transmission `t_c = exp(-β_c·d)`,
//! where red attenuates fastest, plus a slight blur.

use rand::Rng;

use crate::data_io::LoadedPair;
use crate::plane::ImagePlane;

/// A smooth multi-colored texture with a few hard-edged shapes, in [0, 255].
pub fn reference_scene<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> ImagePlane {
    let mut gratings = Vec::new();
    for _ in 0..3 {
        let fy: f64 = rng.random_range(0.5..3.0);
        let fx: f64 = rng.random_range(0.5..3.0);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(-50.0..50.0));
        gratings.push((fy, fx, phase, amp));
    }
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(80.0..180.0));
    let mut discs = Vec::new();
    for _ in 0..3 {
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let r = rng.random_range(0.1..0.25) * height.min(width) as f64;
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(20.0..235.0));
        discs.push((cy, cx, r, color));
    }
    ImagePlane::from_fn(height, width, 3, |y, x, c| {
        let (v, u) = (y as f64 / height as f64, x as f64 / width as f64);
        let mut val = base[c];
        for (fy, fx, phase, amp) in &gratings {
            val += amp[c] * (std::f64::consts::TAU * (fy * v + fx * u) + phase).sin();
        }
        for (cy, cx, r, color) in &discs {
            if (y as f64 - cy).hypot(x as f64 - cx) < *r {
                val = color[c];
            }
        }
        val.clamp(0.0, 255.0) as f32
    })
}

/// Water-body parameters of one degradation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaterParams {
    /// Attenuation coefficients per RGB channel.
    pub beta: [f64; 3],
    /// Background light per channel, in [0, 255].
    pub backlight: [f64; 3],
    /// Scene distance at the top and bottom rows.
    pub depth: (f64, f64),
}

impl WaterParams {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            beta: [
                rng.random_range(1.2..1.8),
                rng.random_range(0.3..0.6),
                rng.random_range(0.2..0.4),
            ],
            backlight: [
                rng.random_range(10.0..40.0),
                rng.random_range(100.0..150.0),
                rng.random_range(120.0..170.0),
            ],
            depth: (rng.random_range(0.6..1.0), rng.random_range(1.0..1.5)),
        }
    }
}

/// Applies attenuation, backscatter and a light 3×3 blur.
pub fn underwater_degrade(img: &ImagePlane, water: &WaterParams) -> ImagePlane {
    let h = img.height();
    let hazy = ImagePlane::from_fn(h, img.width(), 3, |y, x, c| {
        let f = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.0 };
        let d = water.depth.0 + f * (water.depth.1 - water.depth.0);
        let t = (-water.beta[c] * d).exp();
        (img.get(y, x, c) as f64 * t + water.backlight[c] * (1.0 - t)) as f32
    });
    let (hh, ww) = (hazy.height() as isize, hazy.width() as isize);
    ImagePlane::from_fn(hazy.height(), hazy.width(), 3, |y, x, c| {
        let mut acc = 0.0;
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let yy = (y as isize + dy).clamp(0, hh - 1) as usize;
                let xx = (x as isize + dx).clamp(0, ww - 1) as usize;
                let w = if dy == 0 && dx == 0 { 0.5 } else { 0.5 / 8.0 };
                acc += w * hazy.get(yy, xx, c);
            }
        }
        acc
    })
}

/// Reference scene and its degraded counterpart.
pub fn underwater_pair<R: Rng + ?Sized>(id: &str, height: usize, width: usize, rng: &mut R) -> LoadedPair {
    let reference = reference_scene(height, width, rng);
    let water = WaterParams::random(rng);
    LoadedPair {
        id: id.to_string(),
        degraded: underwater_degrade(&reference, &water),
        reference,
    }
}

/// Per-channel gains drawn uniformly from `range`.
pub fn random_gains<R: Rng + ?Sized>(range: std::ops::Range<f64>, rng: &mut R) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(range.clone()))
}

/// Multiplies each channel by its gain.
pub fn color_cast(img: &ImagePlane, gains: [f64; 3]) -> ImagePlane {
    ImagePlane::from_fn(img.height(), img.width(), img.channels(), |y, x, c| {
        (img.get(y, x, c) as f64 * gains[c % 3]) as f32
    })
}

/// Mean absolute difference between the channel means, over the three
/// channel pairs.
pub fn channel_mean_gap(img: &ImagePlane) -> f64 {
    let m = img.channel_means();
    ((m[0] - m[1]).abs() + (m[0] - m[2]).abs() + (m[1] - m[2]).abs()) / 3.0
}
