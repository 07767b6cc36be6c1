//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uwrestore::csdr::{CsdrConfig, CsdrWeights, csdr_forward};
use uwrestore::denoiser::{eps_predict, DenoiserConfig, DenoiserInput, DenoiserWeights};
use uwrestore::diffusion::gaussian;
use uwrestore::gcc::{gcc_forward, GccConfig, GccWeights};
use uwrestore::nn::ParamStore;
use uwrestore::objectives::{loss_content, loss_details, loss_noise, ssim, Reduction};
use uwrestore::pipeline::{compute_losses, ContentMode, Model, Precision, TrainConfig};
use uwrestore::wavelet::HighFreqTriplet;

pub const GRAD_TOL: f64 = 1e-3;
const STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    gaussian(rng, shape, DType::F64, &Device::Cpu).unwrap()
}

/// Replaces every parameter by Gaussian noise of standard deviation `scale`
/// so zero-initialized heads do not hide gradient paths.
pub fn randomize(ps: &ParamStore, scale: f64, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = ps.iter().map(|(n, _)| n.clone()).collect();
    for n in names {
        let dims = ps.get(&n).unwrap().dims().to_vec();
        ps.assign(&n, &(randn(rng, &dims) * scale).unwrap()).unwrap();
    }
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between analytic and central
/// finite-difference gradients of `f` over up to `per_var` random
/// coordinates of every variable.
pub fn grad_error(vars: &[Var], f: impl Fn() -> Tensor, per_var: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let loss = f();
    let grads = loss.backward().unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for var in vars {
        let n = var.elem_count();
        let g = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            None => vec![0.0; n],
        };
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let shape = var.shape().clone();
        for i in sample(&mut rng, n, per_var.min(n)) {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap()).unwrap();
                f().to_scalar::<f64>().unwrap()
            };
            let d = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            var.set(&Tensor::from_vec(base.clone(), shape.clone(), &Device::Cpu).unwrap())
                .unwrap();
            analytic.push(g[i]);
            numeric.push(d);
        }
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    assert!(denom > 0.0, "gradient check saw only zero gradients");
    diff / denom
}

fn vars_of(ps: &ParamStore) -> Vec<Var> {
    ps.iter().map(|(_, v)| v.clone()).collect()
}

pub fn csdr_gradient_error() -> f64 {
    let mut r = rng(11);
    let mut ps = ParamStore::new(DType::F64, Device::Cpu);
    let cfg = CsdrConfig {
        internal: 4,
        key_dim: 4,
        ..Default::default()
    };
    let w = CsdrWeights::new(&mut ps, "csdr", &cfg, &mut r).unwrap();
    randomize(&ps, 0.4, &mut r);
    let inputs: Vec<Var> = (0..3).map(|_| Var::from_tensor(&randn(&mut r, &[1, 3, 4, 4])).unwrap()).collect();
    let probe = randn(&mut r, &[1, 9, 4, 4]);
    let f = || {
        let t = HighFreqTriplet::new(
            inputs[0].as_tensor().clone(),
            inputs[1].as_tensor().clone(),
            inputs[2].as_tensor().clone(),
        )
        .unwrap();
        let out = csdr_forward(&t, &w).unwrap().concat().unwrap();
        (out * &probe).unwrap().sum_all().unwrap()
    };
    let mut vars = vars_of(&ps);
    vars.extend(inputs.iter().cloned());
    grad_error(&vars, f, 4, 1)
}

pub fn gcc_gradient_error() -> f64 {
    let mut r = rng(12);
    let mut ps = ParamStore::new(DType::F64, Device::Cpu);
    let cfg = GccConfig {
        base_width: 4,
        embed_dim: 8,
        ..Default::default()
    };
    let w = GccWeights::new(&mut ps, "gcc", &cfg, &mut r).unwrap();
    randomize(&ps, 0.4, &mut r);
    let x = Var::from_tensor(&randn(&mut r, &[2, 3, 8, 8])).unwrap();
    let probe = randn(&mut r, &[2, 3, 8, 8]);
    let f = || {
        let y = gcc_forward(x.as_tensor(), 7, &w).unwrap();
        (y * &probe).unwrap().sum_all().unwrap()
    };
    let mut vars = vars_of(&ps);
    vars.push(x.clone());
    grad_error(&vars, f, 4, 2)
}

pub fn tiny_denoiser_config() -> DenoiserConfig {
    DenoiserConfig {
        base_width: 4,
        channel_mult: vec![1, 2],
        blocks_per_scale: 1,
        embed_dim: 8,
        groups: 2,
        ..Default::default()
    }
}

pub fn denoiser_gradient_error() -> f64 {
    let mut r = rng(13);
    let mut ps = ParamStore::new(DType::F64, Device::Cpu);
    let w = DenoiserWeights::new(&mut ps, "eps", &tiny_denoiser_config(), &mut r).unwrap();
    randomize(&ps, 0.3, &mut r);
    let x = Var::from_tensor(&randn(&mut r, &[2, 3, 4, 4])).unwrap();
    let cond_low = randn(&mut r, &[2, 3, 4, 4]);
    let cond_high = randn(&mut r, &[2, 9, 4, 4]);
    let probe = randn(&mut r, &[2, 3, 4, 4]);
    let f = || {
        let input = DenoiserInput {
            x_t: x.as_tensor().clone(),
            cond_low: cond_low.clone(),
            cond_high: cond_high.clone(),
            ts: vec![3, 17],
        };
        (eps_predict(&input, &w).unwrap() * &probe).unwrap().sum_all().unwrap()
    };
    let mut vars = vars_of(&ps);
    vars.push(x.clone());
    grad_error(&vars, f, 3, 3)
}

/// Gradient errors of every loss with respect to its inputs.
pub fn loss_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut r = rng(14);
    let a = Var::from_tensor(&(randn(&mut r, &[1, 3, 12, 12]) * 0.3).unwrap()).unwrap();
    // Offset keeps every |a − b| far from the L1 kink.
    let b = Var::from_tensor(&((randn(&mut r, &[1, 3, 12, 12]) * 0.05).unwrap() + 0.5).unwrap()).unwrap();
    let both = vec![a.clone(), b.clone()];
    let mut out = vec![
        ("noise loss", grad_error(&both, || loss_noise(a.as_tensor(), b.as_tensor(), Reduction::Mean).unwrap(), 12, 4)),
        ("ssim", grad_error(&both, || ssim(a.as_tensor(), b.as_tensor()).unwrap(), 12, 5)),
        ("content loss", grad_error(&both, || loss_content(a.as_tensor(), b.as_tensor()).unwrap(), 12, 6)),
    ];
    let levels: Vec<Var> = (0..6).map(|_| Var::from_tensor(&randn(&mut r, &[1, 3, 2, 2])).unwrap()).collect();
    let reference: Vec<HighFreqTriplet> = (0..2)
        .map(|_| HighFreqTriplet::new(randn(&mut r, &[1, 3, 2, 2]), randn(&mut r, &[1, 3, 2, 2]), randn(&mut r, &[1, 3, 2, 2])).unwrap())
        .collect();
    let details = || {
        let refined: Vec<HighFreqTriplet> = levels
            .chunks(3)
            .map(|c| HighFreqTriplet::new(c[0].as_tensor().clone(), c[1].as_tensor().clone(), c[2].as_tensor().clone()).unwrap())
            .collect();
        loss_details(&refined, &reference, Reduction::Mean).unwrap()
    };
    out.push(("detail loss", grad_error(&levels, details, 4, 7)));
    out
}

/// Small double-precision training setup (K = 1, 32-px patches).
pub fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        timesteps: 8,
        sample_steps: 2,
        levels: 1,
        batch_size: 2,
        patch_size: 32,
        grad_steps: 2,
        beta_end: 0.2,
        precision: Precision::F64,
        denoiser: DenoiserConfig {
            base_width: 4,
            channel_mult: vec![1, 2],
            blocks_per_scale: 1,
            embed_dim: 8,
            groups: 2,
            ..Default::default()
        },
        gcc: GccConfig {
            base_width: 4,
            embed_dim: 8,
            ..Default::default()
        },
        csdr: CsdrConfig {
            internal: 4,
            key_dim: 4,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Gradient error of the full training objective (fully unrolled reverse
/// loop) with respect to a sample of every parameter tensor.
pub fn objective_gradient_error(mode: ContentMode) -> f64 {
    let mut config = tiny_train_config();
    config.content_mode = mode;
    let mut r = rng(15);
    let model = Model::new(&config, &mut r).unwrap();
    randomize(&model.params, 0.2, &mut r);
    let deg = (randn(&mut r, &[2, 3, 32, 32]) * 0.5).unwrap();
    let reference = (randn(&mut r, &[2, 3, 32, 32]) * 0.5).unwrap();
    let sched = config.schedule().unwrap();
    let f = || {
        let mut r = rng(99);
        compute_losses(&model, &deg, &reference, &sched, &config, &mut r).unwrap().total
    };
    grad_error(&vars_of(&model.params), f, 1, 8)
}
