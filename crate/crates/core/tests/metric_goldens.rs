//! Quality metrics and SSIM against frozen vectors from the independent
//! numpy/scikit-image oracle in `oracles/metric_oracle.py`.

use candle_core::{Device, Tensor};
use serde::Deserialize;
use uwrestore::objectives::ssim;
use uwrestore::plane::ImagePlane;
use uwrestore::quality::{uciqe_terms, uciqe_with, uiqm_terms, uiqm_with, MetricWeights};

#[derive(Deserialize)]
struct Card {
    name: String,
    height: usize,
    width: usize,
    block: usize,
    pixels: Vec<f32>,
    uciqe: f64,
    uciqe_terms: [f64; 3],
    uiqm: f64,
    uiqm_terms: [f64; 3],
}

#[derive(Deserialize)]
struct SsimCase {
    name: String,
    height: usize,
    width: usize,
    channels: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    ssim: f64,
}

#[derive(Deserialize)]
struct Goldens {
    cards: Vec<Card>,
    ssim: Vec<SsimCase>,
}

fn goldens() -> Goldens {
    serde_json::from_str(include_str!("oracles/metric_goldens.json")).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

#[test]
fn uciqe_matches_oracle() {
    let w = MetricWeights::pinned();
    for card in goldens().cards {
        let img = ImagePlane::new(card.height, card.width, 3, card.pixels.clone()).unwrap();
        let t = uciqe_terms(&img, &w.uciqe).unwrap();
        let got = [t.chroma_std, t.luminance_contrast, t.saturation_mean];
        for (g, e) in got.iter().zip(card.uciqe_terms) {
            assert!(close(*g, e, 1e-9), "{}: {got:?} vs {:?}", card.name, card.uciqe_terms);
        }
        assert!(close(uciqe_with(&img, &w.uciqe).unwrap(), card.uciqe, 1e-9), "{}", card.name);
    }
}

#[test]
fn uiqm_matches_oracle() {
    let mut w = MetricWeights::pinned();
    for card in goldens().cards {
        w.uiqm.block = card.block;
        let img = ImagePlane::new(card.height, card.width, 3, card.pixels.clone()).unwrap();
        let t = uiqm_terms(&img, &w.uiqm).unwrap();
        let got = [t.uicm, t.uism, t.uiconm];
        for (g, e) in got.iter().zip(card.uiqm_terms) {
            assert!(close(*g, e, 1e-9), "{}: {got:?} vs {:?}", card.name, card.uiqm_terms);
        }
        assert!(close(uiqm_with(&img, &w.uiqm).unwrap(), card.uiqm, 1e-9), "{}", card.name);
    }
}

#[test]
fn ssim_matches_oracle() {
    for case in goldens().ssim {
        // Oracle images are HWC in [0, 1]; the loss takes NCHW in [-1, 1].
        let to_tensor = |v: &[f64]| {
            let scaled: Vec<f64> = v.iter().map(|x| 2.0 * x - 1.0).collect();
            Tensor::from_vec(scaled, (case.height, case.width, case.channels), &Device::Cpu)
                .unwrap()
                .permute((2, 0, 1))
                .unwrap()
                .unsqueeze(0)
                .unwrap()
                .contiguous()
                .unwrap()
        };
        let got = ssim(&to_tensor(&case.a), &to_tensor(&case.b))
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((got - case.ssim).abs() < 1e-9, "{}: {got} vs {}", case.name, case.ssim);
    }
}

#[test]
fn anticorrelated_checkerboard_is_strongly_negative() {
    let g = goldens();
    let case = g.ssim.iter().find(|c| c.name == "checkerboard_vs_inverse").unwrap();
    assert!(case.ssim < -0.99);
}
