//! Adam with explicit, serializable moment buffers.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    steps: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates every parameter that has a gradient and is not frozen.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64, frozen: impl Fn(&str) -> bool) -> Result<()> {
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bias1 = 1.0 - beta1.powi(self.steps as i32);
        let bias2 = 1.0 - beta2.powi(self.steps as i32);
        for (name, var) in params.iter() {
            if frozen(name) {
                continue;
            }
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = match self.first.get(name) {
                Some(m) => ((m * beta1)? + (g * (1.0 - beta1))?)?,
                None => (g * (1.0 - beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                None => (g.sqr()? * (1.0 - beta2))?,
            };
            let denom = ((&v / bias2)?.sqrt()? + eps)?;
            let update = ((&m / bias1)? / denom)?;
            var.set(&(var.as_tensor() - (update * lr)?)?.detach())?;
            self.first.insert(name.clone(), m.detach());
            self.second.insert(name.clone(), v.detach());
        }
        Ok(())
    }

    /// Moment buffers as `(name, tensor)` under `adam.m.*` / `adam.v.*`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (n, t) in &self.first {
            out.push((format!("adam.m.{n}"), t.clone()));
        }
        for (n, t) in &self.second {
            out.push((format!("adam.v.{n}"), t.clone()));
        }
        out
    }

    /// Rebuilds the optimizer from saved moments.
    pub fn restore(config: AdamConfig, steps: u64, tensors: impl IntoIterator<Item = (String, Tensor)>) -> Result<Self> {
        let mut adam = Self::new(config);
        adam.steps = steps;
        for (name, t) in tensors {
            if let Some(n) = name.strip_prefix("adam.m.") {
                adam.first.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("adam.v.") {
                adam.second.insert(n.to_string(), t);
            } else {
                return Err(Error::CheckpointCorrupt(format!("unexpected optimizer tensor {name}")));
            }
        }
        Ok(adam)
    }
}

/// Rescales the gradients of the non-frozen parameters so their joint L2
/// norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(
    params: &ParamStore,
    grads: &mut GradStore,
    max_norm: f64,
    frozen: impl Fn(&str) -> bool,
) -> Result<f64> {
    let live: Vec<&Var> = params
        .iter()
        .filter(|(n, _)| !frozen(n))
        .map(|(_, v)| v)
        .filter(|v| grads.get(v.as_tensor()).is_some())
        .collect();
    let mut sq = 0.0;
    for v in &live {
        let g = grads.get(v.as_tensor()).expect("filtered above");
        sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for v in live {
            let g = (grads.get(v.as_tensor()).expect("filtered above") * scale)?;
            grads.insert(v.as_tensor(), g);
        }
    }
    Ok(norm)
}

/// Step-decay schedule: `lr0 · decay^⌊(epoch − 1)/every⌋` for 1-based epochs.
pub fn decayed_lr(lr0: f64, decay: f64, every: usize, epoch: usize) -> f64 {
    let k = epoch.saturating_sub(1) / every.max(1);
    lr0 * decay.powi(k as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn clipping_bounds_the_joint_norm() {
        let mut ps = ParamStore::new(DType::F64, Device::Cpu);
        ps.constant("a".into(), &[2], 1.0).unwrap();
        ps.constant("b".into(), &[1], 1.0).unwrap();
        let (a, b) = (ps.get("a").unwrap().clone(), ps.get("b").unwrap().clone());
        // d/da Σ 3a = 3, d/db 4b = 4: joint norm √(9 + 9 + 16).
        let loss = ((a.as_tensor() * 3.0).unwrap().sum_all().unwrap() + (b.as_tensor() * 4.0).unwrap().sum_all().unwrap()).unwrap();
        let mut grads = loss.backward().unwrap();
        let norm = clip_grad_norm(&ps, &mut grads, 1.0, |_| false).unwrap();
        assert!((norm - 34f64.sqrt()).abs() < 1e-12);
        let ga = grads.get(a.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        let gb = grads.get(b.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        let clipped = (ga.iter().map(|g| g * g).sum::<f64>() + gb[0] * gb[0]).sqrt();
        assert!((clipped - 1.0).abs() < 1e-12);

        let mut grads = loss.backward().unwrap();
        clip_grad_norm(&ps, &mut grads, 100.0, |_| false).unwrap();
        assert_eq!(grads.get(b.as_tensor()).unwrap().to_vec1::<f64>().unwrap(), [4.0]);
        clip_grad_norm(&ps, &mut grads, 1.0, |n| n == "a").unwrap();
        assert_eq!(grads.get(a.as_tensor()).unwrap().to_vec1::<f64>().unwrap(), [3.0, 3.0]);
    }

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(decayed_lr(1e-4, 0.8, 50, 1), 1e-4);
        assert_eq!(decayed_lr(1e-4, 0.8, 50, 50), 1e-4);
        assert!((decayed_lr(1e-4, 0.8, 50, 51) - 8e-5).abs() < 1e-18);
        assert!((decayed_lr(1e-4, 0.8, 50, 101) - 6.4e-5).abs() < 1e-18);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first Adam step has magnitude ≈ lr.
        let mut ps = ParamStore::new(DType::F64, Device::Cpu);
        ps.constant("w".into(), &[3], 1.0).unwrap();
        let w = ps.get("w").unwrap().as_tensor().clone();
        let coeffs = Tensor::new(&[2.0f64, -3.0, 0.5], &Device::Cpu).unwrap();
        let loss = (&w * &coeffs).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&ps, &grads, 0.1, |_| false).unwrap();
        let after = ps.get("w").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        let expect = [0.9, 1.1, 0.9];
        for (a, e) in after.iter().zip(expect) {
            assert!((a - e).abs() < 1e-6, "{after:?}");
        }
        assert_eq!(adam.steps(), 1);
        assert_eq!(adam.state_tensors().len(), 2);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut ps = ParamStore::new(DType::F64, Device::Cpu);
        ps.constant("a.w".into(), &[2], 1.0).unwrap();
        ps.constant("b.w".into(), &[2], 1.0).unwrap();
        let loss = (ps.get("a.w").unwrap().as_tensor() + ps.get("b.w").unwrap().as_tensor())
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&ps, &grads, 0.1, |n| n.starts_with("a.")).unwrap();
        assert_eq!(ps.get("a.w").unwrap().as_tensor().to_vec1::<f64>().unwrap(), [1.0, 1.0]);
        assert_ne!(ps.get("b.w").unwrap().as_tensor().to_vec1::<f64>().unwrap(), [1.0, 1.0]);
    }
}
