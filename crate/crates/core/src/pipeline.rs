//! Training and inference for the full restoration model.
//!
//! Training: both images of a pair are decomposed to level K; the degraded
//! detail bands are refined; the reference low band is noised at a random
//! timestep and the noise is predicted conditioned on the degraded low band
//! and refined details. The restored low band (from an unrolled reverse loop
//! with per-step color correction, or a one-shot x0 estimate) enters a
//! content loss, the refined details a detail loss, and one optimizer step
//! is taken on the weighted total.
//!
//! Inference runs the same reverse loop from pure noise and inverts the
//! wavelet transform with the refined details.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TensorData};
use crate::csdr::{Csdr, CsdrConfig};
use crate::data_io::{load_pair, sample_patch, LoadedPair, PairedIndex, Patch};
use crate::denoiser::{eps_predict, DenoiserConfig, DenoiserInput, DenoiserWeights};
use crate::diffusion::{gaussian, make_schedule, p_step, predict_x0, q_sample, skip_grid, NoiseSchedule, SamplingMode};
use crate::error::{Error, Result};
use crate::gcc::{gcc_forward, gcc_forward_batch, GccConfig, GccWeights};
use crate::nn::ParamStore;
use crate::objectives::{loss_content, loss_details, loss_noise, loss_total, LossBreakdown, LossValues, Reduction};
use crate::optim::{clip_grad_norm, decayed_lr, Adam, AdamConfig};
use crate::plane::ImagePlane;
use crate::wavelet::{dwt, idwt, HighFreqTriplet, WaveletPyramid};

/// How the restored low band for the content loss is produced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentMode {
    /// Unrolled S-step reverse loop with color correction at each step.
    #[default]
    FullLoop,
    /// One-shot x0 estimate from the training noise prediction, then one
    /// color correction. Faster, but departs from the reverse loop.
    X0Shortcut,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Diffusion length T.
    pub timesteps: usize,
    /// Reverse steps S used by the inner training loop and by default at
    /// inference.
    pub sample_steps: usize,
    /// Wavelet levels K.
    pub levels: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; `None` means one pass over the pairs.
    pub steps_per_epoch: Option<usize>,
    /// Weight λ of the detail loss.
    pub lambda: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub content_mode: ContentMode,
    /// Reverse steps at the end of the inner loop that gradients flow
    /// through; `sample_steps` unrolls fully.
    pub grad_steps: usize,
    /// Sampling mode of the inner training loop.
    pub train_sampling: SamplingMode,
    pub reduction: Reduction,
    pub seed: u64,
    pub use_gcc: bool,
    pub use_csdr: bool,
    /// Clip the joint gradient norm to this value before each update.
    pub grad_clip: Option<f64>,
    /// Parameter-name prefixes excluded from optimization, e.g. `"csdr."`.
    pub freeze: Vec<String>,
    pub checkpoint_every: usize,
    pub precision: Precision,
    pub adam: AdamConfig,
    pub denoiser: DenoiserConfig,
    pub gcc: GccConfig,
    pub csdr: CsdrConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            timesteps: 200,
            sample_steps: 10,
            levels: 2,
            batch_size: 16,
            patch_size: 256,
            lr: 1e-4,
            lr_decay: 0.8,
            lr_decay_every: 50,
            epochs: 500,
            steps_per_epoch: None,
            lambda: 0.1,
            beta_start: 1e-4,
            beta_end: 0.02,
            content_mode: ContentMode::FullLoop,
            grad_steps: 2,
            train_sampling: SamplingMode::Stochastic,
            reduction: Reduction::Mean,
            seed: 0,
            use_gcc: true,
            use_csdr: true,
            grad_clip: None,
            freeze: Vec::new(),
            checkpoint_every: 10,
            precision: Precision::F32,
            adam: AdamConfig::default(),
            denoiser: DenoiserConfig::default(),
            gcc: GccConfig::default(),
            csdr: CsdrConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sample_steps == 0 || self.timesteps == 0 || self.timesteps % self.sample_steps != 0 {
            return bad(format!(
                "timesteps ({}) must be a positive multiple of sample_steps ({})",
                self.timesteps, self.sample_steps
            ));
        }
        if self.levels == 0 {
            return bad("at least one wavelet level is required".into());
        }
        if self.patch_size % self.spatial_multiple() != 0 {
            return bad(format!(
                "patch_size {} must be a multiple of {} (2^levels times the denoiser's downsampling)",
                self.patch_size,
                self.spatial_multiple()
            ));
        }
        if self.patch_size >> self.levels < 8 {
            return bad(format!("patch_size {} leaves a low band smaller than 8 pixels", self.patch_size));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        if self.grad_steps == 0 || self.grad_steps > self.sample_steps {
            return bad(format!("grad_steps must be in 1..={}", self.sample_steps));
        }
        if self.denoiser.in_channels != 15 || self.denoiser.out_channels != 3 {
            return bad("denoiser must map 15 input channels to 3".into());
        }
        if self.gcc.channels != 3 || self.csdr.channels != 3 {
            return bad("color correction and detail refinement work on RGB".into());
        }
        self.denoiser.validate()?;
        self.gcc.validate()?;
        self.csdr.validate()?;
        Ok(())
    }

    /// Image sizes must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        (1 << self.levels) * self.denoiser.spatial_multiple()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        decayed_lr(self.lr, self.lr_decay, self.lr_decay_every, epoch)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.freeze.iter().any(|p| name.starts_with(p.as_str()))
    }
}

/// All trainable weights.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: ParamStore,
    pub denoiser: DenoiserWeights,
    pub gcc: GccWeights,
    pub csdr: Csdr,
    pub levels: usize,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: &TrainConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(config.precision.dtype(), Device::Cpu);
        let denoiser = DenoiserWeights::new(&mut params, "denoiser", &config.denoiser, rng)?;
        let gcc = GccWeights::new(&mut params, "gcc", &config.gcc, rng)?;
        let csdr = Csdr::new(&mut params, "csdr", config.levels, &config.csdr, rng)?;
        Ok(Self {
            params,
            denoiser,
            gcc,
            csdr,
            levels: config.levels,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    fn low_scale(&self) -> f64 {
        (1u64 << self.levels) as f64
    }

    /// Refined (or, when disabled, raw) detail triplets of a pyramid.
    pub fn details(&self, pyramid: &WaveletPyramid, use_csdr: bool) -> Result<Vec<HighFreqTriplet>> {
        if use_csdr {
            self.csdr.forward(&pyramid.highs)
        } else {
            Ok(pyramid.highs.clone())
        }
    }

    fn condition(&self, pyramid: &WaveletPyramid, details: &[HighFreqTriplet]) -> Result<(Tensor, Tensor)> {
        let s = self.low_scale();
        let coarsest = details.last().ok_or_else(|| Error::Shape("empty wavelet pyramid".into()))?;
        Ok(((&pyramid.low / s)?, (coarsest.concat()? / s)?))
    }

    fn predict(&self, x_t: &Tensor, cond: &(Tensor, Tensor), ts: Vec<usize>) -> Result<Tensor> {
        eps_predict(
            &DenoiserInput {
                x_t: x_t.clone(),
                cond_low: cond.0.clone(),
                cond_high: cond.1.clone(),
                ts,
            },
            &self.denoiser,
        )
    }

    /// Runs the reverse loop from pure noise over `grid`, correcting colors
    /// after every step when `use_gcc`. Gradients are kept only through the
    /// last `grad_steps` steps (`0` detaches everything).
    #[allow(clippy::too_many_arguments)]
    fn reverse_loop<R: Rng + ?Sized>(
        &self,
        cond: &(Tensor, Tensor),
        sched: &NoiseSchedule,
        samples: usize,
        mode: SamplingMode,
        use_gcc: bool,
        grad_steps: usize,
        rng: &mut R,
    ) -> Result<Tensor> {
        let grid = skip_grid(sched.steps(), samples)?;
        let mut x = gaussian(rng, cond.0.shape().clone(), cond.0.dtype(), cond.0.device())?;
        let first_tracked = grid.len().saturating_sub(grad_steps);
        for (i, &(t, t_prev)) in grid.pairs().iter().enumerate() {
            if i < first_tracked || grad_steps == 0 {
                x = x.detach();
            }
            let eps = self.predict(&x, cond, vec![t])?;
            x = p_step(&x, &eps, t, t_prev, sched, mode, rng)?;
            if use_gcc {
                x = gcc_forward(&x, t_prev, &self.gcc)?;
            }
            if grad_steps == 0 || i < first_tracked {
                x = x.detach();
                if !all_finite(&x)? {
                    return Err(Error::NonFinite {
                        what: format!("reverse sample at step {} (t = {t})", i + 1),
                    });
                }
            }
        }
        Ok(x)
    }

    pub fn to_tensors(&self) -> Result<Vec<(String, TensorData)>> {
        self.params
            .iter()
            .map(|(n, v)| Ok((n.clone(), TensorData::from_tensor(v.as_tensor())?)))
            .collect()
    }

    /// Copies weights from checkpoint tensors named like the parameters.
    pub fn load_tensors(&self, ckpt: &Checkpoint) -> Result<()> {
        for (name, var) in self.params.iter() {
            let data = ckpt
                .tensors
                .get(name)
                .ok_or_else(|| Error::CheckpointCorrupt(format!("missing parameter {name}")))?;
            if data.shape != var.dims() {
                return Err(Error::CheckpointCorrupt(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    data.shape,
                    var.dims()
                )));
            }
            self.params.assign(name, &data.to_tensor(self.params.device())?)?;
        }
        Ok(())
    }
}

fn all_finite(t: &Tensor) -> Result<bool> {
    let s = t.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    Ok(s.is_finite())
}

/// A training batch as `(degraded, reference)` tensors in [-1, 1].
pub fn batch_tensors(batch: &[Patch], dtype: DType) -> Result<(Tensor, Tensor)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let deg: Vec<&ImagePlane> = batch.iter().map(|p| &p.degraded).collect();
    let reference: Vec<&ImagePlane> = batch.iter().map(|p| &p.reference).collect();
    Ok((
        ImagePlane::stack(&deg, dtype, &Device::Cpu)?,
        ImagePlane::stack(&reference, dtype, &Device::Cpu)?,
    ))
}

/// Forward pass of one training step: the three losses and their total,
/// still attached to the autograd graph.
pub fn compute_losses<R: Rng + ?Sized>(
    model: &Model,
    degraded: &Tensor,
    reference: &Tensor,
    sched: &NoiseSchedule,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let n = degraded.dim(0)?;
    let pd = dwt(degraded, config.levels)?;
    let pr = dwt(reference, config.levels)?;
    let details = model.details(&pd, config.use_csdr)?;
    let cond = model.condition(&pd, &details)?;
    let x0 = (&pr.low / model.low_scale())?;

    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=sched.steps())).collect();
    let eps = gaussian(rng, x0.shape().clone(), x0.dtype(), x0.device())?;
    let x_t = q_sample(&x0, &ts, &eps, sched)?;
    let eps_hat = model.predict(&x_t, &cond, ts.clone())?;
    let noise = loss_noise(&eps, &eps_hat, config.reduction)?;

    let restored = match config.content_mode {
        ContentMode::FullLoop => model.reverse_loop(
            &cond,
            sched,
            config.sample_steps,
            config.train_sampling,
            config.use_gcc,
            config.grad_steps,
            rng,
        )?,
        ContentMode::X0Shortcut => {
            let x = predict_x0(&x_t, &eps_hat, &ts, sched)?;
            if config.use_gcc {
                gcc_forward_batch(&x, &vec![0; n], &model.gcc)?
            } else {
                x
            }
        }
    };
    let content = loss_content(&restored, &x0)?;
    let detail = loss_details(&details, &pr.highs, config.reduction)?;
    loss_total(noise, detail, content, config.lambda)
}

fn check_finite(v: &LossValues) -> Result<()> {
    for (what, x) in [
        ("noise loss", v.noise),
        ("detail loss", v.details),
        ("content loss", v.content),
        ("total loss", v.total),
    ] {
        if !x.is_finite() {
            return Err(Error::NonFinite { what: what.into() });
        }
    }
    Ok(())
}

/// Serializable progress of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainState {
    epoch: usize,
    step: u64,
    optimizer_steps: u64,
    rng_seed: Vec<u8>,
    rng_stream: u64,
    rng_word_pos: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: TrainConfig,
    state: TrainState,
}

const CHECKPOINT_KIND: &str = "uwrestore-train";

/// Owns the model, optimizer and random stream of a training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub sched: NoiseSchedule,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(&config, &mut rng)?;
        Ok(Self {
            sched: config.schedule()?,
            optimizer: Adam::new(config.adam),
            model,
            config,
            rng,
            epoch: 0,
            step: 0,
        })
    }

    /// One optimizer step on a batch at learning rate `lr`.
    pub fn train_step(&mut self, batch: &[Patch], lr: f64) -> Result<LossValues> {
        let (deg, reference) = batch_tensors(batch, self.model.dtype())?;
        let losses = compute_losses(&self.model, &deg, &reference, &self.sched, &self.config, &mut self.rng)?;
        let values = losses.values()?;
        check_finite(&values)?;
        let mut grads = losses.total.backward()?;
        let config = &self.config;
        if let Some(max) = config.grad_clip {
            clip_grad_norm(&self.model.params, &mut grads, max, |n| config.is_frozen(n))?;
        }
        self.optimizer
            .step(&self.model.params, &grads, lr, |n| config.is_frozen(n))?;
        self.step += 1;
        Ok(values)
    }

    fn sample_batch(&mut self, pairs: &[LoadedPair], order: &[usize], cursor: &mut usize) -> Result<Vec<Patch>> {
        let multiple = self.config.spatial_multiple();
        (0..self.config.batch_size)
            .map(|_| {
                let pair = &pairs[order[*cursor % order.len()]];
                *cursor += 1;
                sample_patch(pair, self.config.patch_size, multiple, &mut self.rng)
            })
            .collect()
    }

    /// Runs one epoch over in-memory pairs, returning per-step losses.
    pub fn run_epoch(&mut self, pairs: &[LoadedPair]) -> Result<Vec<LossValues>> {
        if pairs.is_empty() {
            return Err(Error::Data("no training pairs".into()));
        }
        let epoch = self.epoch + 1;
        let lr = self.config.lr_at(epoch);
        let steps = self
            .config
            .steps_per_epoch
            .unwrap_or_else(|| pairs.len().div_ceil(self.config.batch_size));
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut self.rng);
        let mut cursor = 0;
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch = self.sample_batch(pairs, &order, &mut cursor)?;
            out.push(self.train_step(&batch, lr)?);
        }
        self.epoch = epoch;
        Ok(out)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let state = TrainState {
            epoch: self.epoch,
            step: self.step,
            optimizer_steps: self.optimizer.steps(),
            rng_seed: self.rng.get_seed().to_vec(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
        };
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            config: self.config.clone(),
            state,
        };
        let mut ckpt = Checkpoint {
            meta: serde_json::to_value(&meta).map_err(|e| Error::Data(e.to_string()))?,
            ..Default::default()
        };
        for (n, t) in self.model.to_tensors()? {
            ckpt.tensors.insert(n, t);
        }
        for (n, t) in self.optimizer.state_tensors() {
            ckpt.tensors.insert(n, TensorData::from_tensor(&t)?);
        }
        Ok(ckpt)
    }

    /// Restores a trainer exactly as it was when `ckpt` was taken.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = parse_meta(ckpt)?;
        let mut trainer = Self::new(meta.config)?;
        trainer.model.load_tensors(ckpt)?;
        let device = trainer.model.params.device().clone();
        let moments = ckpt
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with("adam."))
            .map(|(n, d)| Ok((n.clone(), d.to_tensor(&device)?)))
            .collect::<Result<Vec<_>>>()?;
        trainer.optimizer = Adam::restore(trainer.config.adam, meta.state.optimizer_steps, moments)?;
        let seed: [u8; 32] = meta
            .state
            .rng_seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::CheckpointCorrupt("bad rng seed".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(meta.state.rng_stream);
        rng.set_word_pos(
            meta.state
                .rng_word_pos
                .parse()
                .map_err(|_| Error::CheckpointCorrupt("bad rng position".into()))?,
        );
        trainer.rng = rng;
        trainer.epoch = meta.state.epoch;
        trainer.step = meta.state.step;
        Ok(trainer)
    }
}

fn parse_meta(ckpt: &Checkpoint) -> Result<CheckpointMeta> {
    let meta: CheckpointMeta = serde_json::from_value(ckpt.meta.clone())
        .map_err(|e| Error::CheckpointCorrupt(format!("metadata: {e}")))?;
    if meta.kind != CHECKPOINT_KIND {
        return Err(Error::CheckpointCorrupt(format!("unexpected checkpoint kind {}", meta.kind)));
    }
    Ok(meta)
}

/// Model and training configuration stored in a checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<(TrainConfig, Model)> {
    let meta = parse_meta(ckpt)?;
    // Weights are overwritten right away; the init stream is irrelevant.
    let model = Model::new(&meta.config, &mut ChaCha8Rng::seed_from_u64(0))?;
    model.load_tensors(ckpt)?;
    Ok((meta.config, model))
}

/// Where `fit` writes its artifacts.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub dir: PathBuf,
}

impl FitOutput {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:04}.ckpt"))
    }

    pub fn last_path(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
}

/// Trains on every pair of `index` for the configured number of epochs,
/// appending a loss line per step to `train_log.csv` and writing a
/// checkpoint every `checkpoint_every` epochs and at the end. With
/// `resume`, continues from that trainer state.
pub fn fit(index: &PairedIndex, trainer: &mut Trainer, out: &FitOutput) -> Result<()> {
    if index.is_empty() {
        return Err(Error::Data("empty training index".into()));
    }
    std::fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    let pairs = index.entries.iter().map(load_pair).collect::<Result<Vec<_>>>()?;
    let log_path = out.log_path();
    let fresh = !log_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if fresh {
        writeln!(log, "epoch,step,lr,noise,details,content,total").map_err(|e| Error::io(&log_path, e))?;
    }
    while trainer.epoch < trainer.config.epochs {
        let epoch = trainer.epoch + 1;
        let lr = trainer.config.lr_at(epoch);
        let first_step = trainer.step;
        let losses = trainer.run_epoch(&pairs)?;
        for (i, l) in losses.iter().enumerate() {
            writeln!(
                log,
                "{epoch},{},{lr:e},{:.6},{:.6},{:.6},{:.6}",
                first_step + i as u64 + 1,
                l.noise,
                l.details,
                l.content,
                l.total
            )
            .map_err(|e| Error::io(&log_path, e))?;
        }
        let mean_total = losses.iter().map(|l| l.total).sum::<f64>() / losses.len().max(1) as f64;
        log::info!("epoch {epoch}/{}: lr {lr:e}, mean total loss {mean_total:.5}", trainer.config.epochs);
        let last = trainer.epoch == trainer.config.epochs;
        if last || trainer.epoch % trainer.config.checkpoint_every.max(1) == 0 {
            let ckpt = trainer.checkpoint()?;
            ckpt.save(&out.checkpoint_path(trainer.epoch))?;
            ckpt.save(&out.last_path())?;
        }
    }
    Ok(())
}

/// Inference settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Reverse steps; `None` uses the training `sample_steps`.
    pub steps: Option<usize>,
    pub mode: SamplingMode,
    pub use_gcc: bool,
    pub use_csdr: bool,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: None,
            mode: SamplingMode::Stochastic,
            use_gcc: true,
            use_csdr: true,
            seed: 0,
        }
    }
}

/// Restores a [0, 255] RGB image. The image is edge-padded to a size the
/// model accepts and cropped back afterwards; the denoiser runs exactly
/// `samples` times.
pub fn enhance<R: Rng + ?Sized>(
    image: &ImagePlane,
    model: &Model,
    sched: &NoiseSchedule,
    samples: usize,
    config: &SampleConfig,
    rng: &mut R,
) -> Result<ImagePlane> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!("expected an RGB image, got {} channels", image.channels())));
    }
    let multiple = (1 << model.levels) * model.denoiser.config().spatial_multiple();
    let min = 8 << model.levels;
    let padded = image.normalized().pad_replicate(multiple, min, min);
    let x = padded.to_tensor(model.dtype(), &Device::Cpu)?;
    let pyramid = dwt(&x, model.levels)?;
    let details: Vec<HighFreqTriplet> = model
        .details(&pyramid, config.use_csdr)?
        .iter()
        .map(HighFreqTriplet::detach)
        .collect();
    let cond = model.condition(&pyramid, &details)?;
    let cond = (cond.0.detach(), cond.1.detach());
    let low = model.reverse_loop(&cond, sched, samples, config.mode, config.use_gcc, 0, rng)?;
    let restored = idwt(&WaveletPyramid {
        low: (low * model.low_scale())?,
        highs: details,
    })?
    .clamp(-1.0, 1.0)?;
    let out = ImagePlane::from_tensor(&restored, 0)?;
    Ok(out.crop(0, 0, image.height(), image.width())?.denormalized())
}

/// Loaded model ready for inference.
pub struct Restorer {
    pub train_config: TrainConfig,
    pub model: Model,
    pub sched: NoiseSchedule,
}

impl Restorer {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (train_config, model) = load_model(ckpt)?;
        Ok(Self {
            sched: train_config.schedule()?,
            train_config,
            model,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn steps(&self, config: &SampleConfig) -> usize {
        config.steps.unwrap_or(self.train_config.sample_steps)
    }

    /// Restores image number `index` of a batch. Each index draws from its
    /// own stream of the seeded generator, so results do not depend on the
    /// order or parallelism in which images are processed.
    pub fn enhance(&self, image: &ImagePlane, index: u64, config: &SampleConfig) -> Result<ImagePlane> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(index);
        enhance(image, &self.model, &self.sched, self.steps(config), config, &mut rng)
    }
}
