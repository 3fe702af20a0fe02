//! Joint volumetric / planar training: run configuration and presets,
//! ablation masks, the two step kinds, the schedule driver and checkpoints.

mod checkpoint;
mod optim;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    config_hash, load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, TensorEntry, TensorKind,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use optim::{clip_global_norm, learning_rate, AdamW, AdamWConfig};

use crate::autograd::{Graph, KernelReduction, ParamId};
use crate::codebook::{codebook_stats, ema_update, QuantizerConfig};
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{partner_index, swapped_decode_loss, Model, ModelConfig};
use crate::nn::SpatialMode;
use crate::objectives::{adv_loss, rec_loss_graph, total_loss, LossBreakdown, LossTerms, LossWeights};
use crate::tensor::Tensor;
use crate::volume::{check_divisible, Modality, PairedSample, Plane, Slice2d, Volume};

/// Rungs of the component ladder: each arm adds one component to the
/// previous, `no-jt` is the full model without the planar phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "+fma")]
    Fma,
    #[serde(rename = "+mfilm")]
    MFilm,
    #[serde(rename = "+cross")]
    Cross,
    #[serde(rename = "+adv")]
    Adv,
    #[serde(rename = "no-jt")]
    NoJointTraining,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Base,
        Ablation::Fma,
        Ablation::MFilm,
        Ablation::Cross,
        Ablation::Adv,
        Ablation::NoJointTraining,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Base => "base",
            Ablation::Fma => "+fma",
            Ablation::MFilm => "+mfilm",
            Ablation::Cross => "+cross",
            Ablation::Adv => "+adv",
            Ablation::NoJointTraining => "no-jt",
        }
    }

    /// Apply the arm's architecture and weight mask to `cfg`.
    pub fn apply(self, cfg: &mut TrainConfig) {
        let rank = match self {
            Ablation::Base => 0,
            Ablation::Fma => 1,
            Ablation::MFilm => 2,
            Ablation::Cross => 3,
            Ablation::Adv | Ablation::NoJointTraining => 4,
        };
        cfg.encoder.attention = rank >= 1;
        cfg.decoder.attention = rank >= 1;
        cfg.decoder.film = rank >= 2;
        if rank < 3 {
            cfg.weights.lambda_cross = 0.0;
        }
        if rank < 4 {
            cfg.weights.lambda_adv = 0.0;
        }
        if self == Ablation::NoJointTraining {
            cfg.steps_2d = 0;
        }
        cfg.ablation = Some(self);
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown ablation arm `{s}`")))
    }
}

/// Run configuration; serialized as a flat JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps_3d: usize,
    pub steps_2d: usize,
    /// Volumes per volumetric step: `batch_3d / 2` subject pairs, each
    /// contributing both modalities.
    pub batch_3d: usize,
    /// Slices per planar step.
    pub batch_2d: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f32,
    pub weights: LossWeights,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub quantizer: QuantizerConfig,
    pub classifier_hidden: usize,
    /// How 3x3x3 kernels collapse in planar steps.
    pub kernel_reduction: KernelReduction,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Progress line on stderr every this many steps (0: silent).
    pub log_every: usize,
    /// Dataset manifest; the train split is used.
    pub manifest: Option<PathBuf>,
    /// Ablation arm applied to this config, for the record.
    pub ablation: Option<Ablation>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Desk-scale preset: keeps the 4:1 volumetric-to-planar step ratio and
    /// the phase order at a CPU-friendly size.
    pub fn desk() -> Self {
        Self {
            steps_3d: 5000,
            steps_2d: 1250,
            batch_3d: 4,
            batch_2d: 32,
            lr_start: 1e-4,
            lr_end: 4.5e-6,
            optimizer: AdamWConfig::default(),
            grad_clip: 1.0,
            weights: LossWeights::default(),
            encoder: EncoderConfig::default(),
            // The two full-resolution decoder stages dominate CPU step time;
            // they are narrowed here and restored in the long preset.
            decoder: DecoderConfig {
                channels: vec![128, 64, 16, 8],
                ..DecoderConfig::default()
            },
            quantizer: QuantizerConfig::default(),
            classifier_hidden: 32,
            kernel_reduction: KernelReduction::Center,
            seed: 0,
            checkpoint_every: 250,
            log_every: 50,
            manifest: None,
            ablation: None,
        }
    }

    /// Full-length schedule with the published step counts and learning rates.
    pub fn paper_scale() -> Self {
        Self {
            steps_3d: 100_000,
            steps_2d: 25_000,
            batch_3d: 4,
            batch_2d: 128,
            lr_start: 1e-4,
            lr_end: 4.5e-6,
            decoder: DecoderConfig::default(),
            checkpoint_every: 5000,
            log_every: 500,
            ..Self::desk()
        }
    }

    /// Short schedule for multi-seed ablation sweeps: the desk model and
    /// step ratio at a twelfth of the length.
    pub fn ablation_sweep() -> Self {
        Self {
            steps_3d: 400,
            steps_2d: 100,
            checkpoint_every: 100,
            log_every: 25,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-scale" => Ok(Self::paper_scale()),
            "ablation" => Ok(Self::ablation_sweep()),
            other => Err(Error::Invalid(format!(
                "unknown preset `{other}` (desk, paper-scale, ablation)"
            ))),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            quantizer: self.quantizer.clone(),
            classifier_hidden: self.classifier_hidden,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.steps_3d + self.steps_2d
    }

    /// Every problem with the config, or `Ok`.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.steps_3d > 0 && (self.batch_3d == 0 || !self.batch_3d.is_multiple_of(2)) {
            errors.push(format!(
                "batch_3d counts volumes of whole pairs and must be a positive even number, got {}",
                self.batch_3d
            ));
        }
        if self.batch_2d == 0 && self.steps_2d > 0 {
            errors.push("batch_2d must be >= 1".into());
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            errors.push(format!(
                "learning rates must satisfy lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            ));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            errors.push("optimizer betas must be in [0, 1), eps > 0, weight_decay >= 0".into());
        }
        if !(self.grad_clip >= 0.0) {
            errors.push("grad_clip must be >= 0".into());
        }
        self.weights.validate(&mut errors);
        self.model_config().validate(&mut errors);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }
}

/// A planar training sample: one slice and the modality it came from.
#[derive(Clone, Debug)]
pub struct TaggedSlice {
    pub slice: Slice2d,
    pub modality: Modality,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Volumetric,
    Planar,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// Number of completed steps, counting this one.
    pub step: usize,
    pub phase: Phase,
    pub lr: f64,
    pub l_rec: f64,
    pub l_vq: f64,
    pub l_cross: f64,
    pub l_adv: f64,
    pub total: f64,
    pub perplexity: f64,
    pub usage: f64,
    pub grl_lambda: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

/// Losses and parameter gradients of one step, before the update.
pub struct StepGradients {
    pub breakdown: LossBreakdown,
    pub grads: Vec<(ParamId, Tensor)>,
    pub indices: Vec<u32>,
    /// Encoder vectors for the EMA update.
    pub vectors: Vec<f32>,
}

/// Owns the model, the optimizer state and the step counter; the single
/// writer of every parameter.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    pub step: usize,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model_config(), config.seed)?;
        let optimizer = AdamW::new(config.optimizer.clone(), &model.store);
        Ok(Self {
            config: config.clone(),
            model,
            optimizer,
            step: 0,
        })
    }

    /// Resume from `ckpt`, refusing when its config hash differs from
    /// `expected`'s (if given).
    pub fn from_checkpoint(ckpt: &Checkpoint, expected: Option<&TrainConfig>) -> Result<Self> {
        if let Some(cfg) = expected {
            let current = config_hash(cfg);
            if current != ckpt.manifest.config_hash {
                return Err(Error::ConfigHash {
                    checkpoint: ckpt.manifest.config_hash.clone(),
                    current,
                });
            }
        }
        let model = ckpt.model()?;
        let optimizer = ckpt.optimizer(&model)?;
        let mut config = ckpt.config().clone();
        if let Some(cfg) = expected {
            // Bookkeeping fields may legitimately differ between runs.
            config.manifest = cfg.manifest.clone();
            config.checkpoint_every = cfg.checkpoint_every;
            config.log_every = cfg.log_every;
        }
        Ok(Self {
            config,
            model,
            optimizer,
            step: ckpt.step(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.config, &self.model, &self.optimizer, self.step)
    }

    pub fn is_complete(&self) -> bool {
        self.step >= self.config.total_steps()
    }

    pub fn phase(&self) -> Phase {
        if self.step < self.config.steps_3d {
            Phase::Volumetric
        } else {
            Phase::Planar
        }
    }

    pub fn lr(&self) -> f64 {
        learning_rate(self.step, self.config.steps_3d, self.config.lr_start, self.config.lr_end)
    }

    /// Data-order generator for `step`: independent of everything but the
    /// seed and the step index, so resumed runs replay the same batches.
    pub fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step as u64 + 1);
        rng
    }

    /// Draw the volumetric batch of `step`: `batch_3d / 2` distinct pairs,
    /// i.e. `batch_3d` volumes once both modalities are stacked.
    pub fn sample_pairs<'a>(&self, data: &'a [PairedSample], step: usize) -> Vec<&'a PairedSample> {
        let mut rng = self.step_rng(step);
        let k = (self.config.batch_3d / 2).max(1).min(data.len());
        sample(&mut rng, data.len(), k).into_iter().map(|i| &data[i]).collect()
    }

    /// Draw the planar batch of `step`: one plane for the whole batch, then
    /// per slice a subject, a modality and a slice index.
    pub fn sample_slices(&self, data: &[PairedSample], step: usize) -> Result<Vec<TaggedSlice>> {
        let mut rng = self.step_rng(step);
        let plane = Plane::ALL[rng.random_range(0..3)];
        (0..self.config.batch_2d)
            .map(|_| {
                let pair = &data[rng.random_range(0..data.len())];
                let modality = Modality::ALL[rng.random_range(0..2)];
                let vol = pair.volume(modality);
                let index = rng.random_range(0..vol.shape()[plane.axis()]);
                Ok(TaggedSlice {
                    slice: vol.sample_slice(plane, index)?,
                    modality,
                })
            })
            .collect()
    }

    fn trainable_grads(&self, grads: &crate::autograd::Gradients) -> Vec<(ParamId, Tensor)> {
        self.model
            .store
            .ids()
            .filter(|&id| self.model.store.is_trainable(id))
            .filter_map(|id| grads.param(id).map(|g| (id, g.clone())))
            .collect()
    }

    /// Seed the codebook from the first batch's encoder vectors.
    fn ensure_codebook(&mut self, z_anat: &Tensor) -> Result<()> {
        if self.model.codebook_initialized() {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut cb = self.model.codebook();
        cb.init_from_vectors(&crate::codebook::to_vectors(z_anat), self.config.quantizer.init_noise, &mut rng)?;
        self.model.set_codebook(&cb);
        self.model.mark_codebook_initialized();
        Ok(())
    }

    /// Losses and gradients of a volumetric step on `pairs` (no update).
    pub fn gradients_3d(&mut self, pairs: &[&PairedSample]) -> Result<StepGradients> {
        if pairs.is_empty() {
            return Err(Error::Invalid("empty volumetric batch".into()));
        }
        let a: Vec<&Volume> = pairs.iter().map(|p| &p.vol_a).collect();
        let b: Vec<&Volume> = pairs.iter().map(|p| &p.vol_b).collect();
        let n = pairs.len();
        let x = Tensor::cat_batch(&[&Volume::batch(&a)?, &Volume::batch(&b)?])?;
        let mods: Vec<Modality> = [Modality::A, Modality::B].iter().flat_map(|&m| std::iter::repeat_n(m, n)).collect();
        let w = self.config.weights.clone();
        let mode = SpatialMode::Volumetric;

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let latents = self.model.encode(&mut g, xv, mode)?;
        let z = g.value(latents.anat).clone();
        self.ensure_codebook(&z)?;
        let model = &self.model;
        let quant = model.quantize(&mut g, latents.anat)?;
        let film = model.film(&mut g, latents.modality, &mods)?;
        let x_hat = model.decode(&mut g, quant.z_tilde, film.as_ref(), mode)?;
        let rec = rec_loss_graph(&mut g, x_hat, &x, w.lambda_ssim)?;
        let cross = if w.lambda_cross > 0.0 {
            let partner = partner_index(2 * n);
            let parts: Vec<Tensor> = partner.iter().map(|&i| x.narrow_batch(i, 1)).collect();
            let target = Tensor::cat_batch(&parts.iter().collect::<Vec<_>>())?;
            Some(swapped_decode_loss(&mut g, model, quant.z_tilde, film.as_ref(), &target, mode)?.0)
        } else {
            None
        };
        let adv = if w.lambda_adv > 0.0 {
            let lambda = w.grl_at(self.step, self.config.steps_3d);
            Some(adv_loss(&mut g, &model.store, &model.classifier, latents.anat, &mods, lambda)?)
        } else {
            None
        };
        let terms = LossTerms {
            rec: Some(rec),
            vq: Some(quant.loss),
            cross,
            adv,
        };
        let (total, breakdown) = total_loss(&mut g, &terms, &w)?;
        let grads = g.backward(total);
        Ok(StepGradients {
            breakdown,
            grads: self.trainable_grads(&grads),
            indices: quant.indices,
            vectors: quant.vectors,
        })
    }

    /// Losses and gradients of a planar step on same-plane `slices`.
    pub fn gradients_2d(&mut self, slices: &[TaggedSlice]) -> Result<StepGradients> {
        let Some(first) = slices.first() else {
            return Err(Error::Invalid("empty planar batch".into()));
        };
        let plane = first.slice.plane;
        if let Some(bad) = slices.iter().find(|s| s.slice.plane != plane) {
            return Err(Error::Invalid(format!(
                "planar batch mixes {} and {} slices",
                plane.name(),
                bad.slice.plane.name()
            )));
        }
        let parts: Vec<Tensor> = slices.iter().map(|s| s.slice.to_tensor()).collect();
        let x = Tensor::cat_batch(&parts.iter().collect::<Vec<_>>())?;
        let mods: Vec<Modality> = slices.iter().map(|s| s.modality).collect();
        let mode = SpatialMode::Planar {
            plane,
            reduction: self.config.kernel_reduction,
        };
        let w = self.config.weights.clone();

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let latents = self.model.encode(&mut g, xv, mode)?;
        let z = g.value(latents.anat).clone();
        self.ensure_codebook(&z)?;
        let model = &self.model;
        let quant = model.quantize(&mut g, latents.anat)?;
        let film = model.film(&mut g, latents.modality, &mods)?;
        let x_hat = model.decode(&mut g, quant.z_tilde, film.as_ref(), mode)?;
        let rec = rec_loss_graph(&mut g, x_hat, &x, w.lambda_ssim)?;
        let terms = LossTerms {
            rec: Some(rec),
            vq: Some(quant.loss),
            cross: None,
            adv: None,
        };
        let (total, breakdown) = total_loss(&mut g, &terms, &w)?;
        let grads = g.backward(total);
        Ok(StepGradients {
            breakdown,
            grads: self.trainable_grads(&grads),
            indices: quant.indices,
            vectors: quant.vectors,
        })
    }

    fn apply(&mut self, mut sg: StepGradients, phase: Phase, started: Instant) -> Result<StepLog> {
        let lr = self.lr();
        let grad_norm = clip_global_norm(&mut sg.grads, self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        self.optimizer.step(&mut self.model.store, &sg.grads, lr as f32);
        if phase == Phase::Volumetric && self.config.quantizer.ema {
            let mut cb = self.model.codebook();
            ema_update(&mut cb, &sg.vectors, &sg.indices)?;
            self.model.set_codebook(&cb);
        }
        let stats = codebook_stats(&sg.indices, self.config.quantizer.codes);
        let grl = if phase == Phase::Volumetric && self.config.weights.lambda_adv > 0.0 {
            self.config.weights.grl_at(self.step, self.config.steps_3d) as f64
        } else {
            0.0
        };
        self.step += 1;
        let b = sg.breakdown;
        Ok(StepLog {
            step: self.step,
            phase,
            lr,
            l_rec: b.l_rec,
            l_vq: b.l_vq,
            l_cross: b.l_cross,
            l_adv: b.l_adv,
            total: b.total,
            perplexity: stats.perplexity,
            usage: stats.usage,
            grl_lambda: grl,
            grad_norm,
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    /// Volumetric step: own and swapped decodes, adversarial term, one
    /// optimizer update, one EMA codebook update.
    pub fn train_step_3d(&mut self, pairs: &[&PairedSample]) -> Result<StepLog> {
        let started = Instant::now();
        let sg = self.gradients_3d(pairs)?;
        self.apply(sg, Phase::Volumetric, started)
    }

    /// Planar step: slice reconstruction (plus commitment) only, no EMA.
    pub fn train_step_2d(&mut self, slices: &[TaggedSlice]) -> Result<StepLog> {
        let started = Instant::now();
        let sg = self.gradients_2d(slices)?;
        self.apply(sg, Phase::Planar, started)
    }

    /// Run the next scheduled step on `data`.
    pub fn step_once(&mut self, data: &[PairedSample]) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::Invalid("no training samples".into()));
        }
        match self.phase() {
            Phase::Volumetric => {
                let pairs = self.sample_pairs(data, self.step);
                self.train_step_3d(&pairs)
            }
            Phase::Planar => {
                let slices = self.sample_slices(data, self.step)?;
                self.train_step_2d(&slices)
            }
        }
    }
}

/// File names inside a run directory.
pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.nqck";
pub const PHASE1_CHECKPOINT_FILE: &str = "checkpoint_3d.nqck";
pub const FINAL_CHECKPOINT_FILE: &str = "final.nqck";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    /// Steps were run and the schedule finished.
    Completed,
    /// The resumed checkpoint had already finished the schedule.
    AlreadyComplete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub steps: usize,
    pub final_checkpoint: PathBuf,
    pub last: Option<StepLog>,
}

/// Check that every sample shares one shape divisible by the model's
/// downsampling factor.
pub fn check_training_data(data: &[PairedSample], cfg: &TrainConfig) -> Result<()> {
    let Some(first) = data.first() else {
        return Err(Error::Invalid("no training samples".into()));
    };
    let shape = first.shape();
    check_divisible(shape, cfg.encoder.factor())?;
    if let Some(bad) = data.iter().find(|p| p.shape() != shape) {
        return Err(Error::Shape(format!("training volumes mix shapes {shape:?} and {:?}", bad.shape())));
    }
    Ok(())
}

/// Run the two-phase schedule on `data`, writing the config snapshot, the
/// JSON-lines log and checkpoints into `out`. With `resume`, training
/// continues from the checkpoint (whose config hash must match `cfg`).
pub fn run_schedule(
    cfg: &TrainConfig,
    data: &[PairedSample],
    out: &Path,
    resume: Option<&Path>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    check_training_data(data, cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut trainer = match resume {
        Some(path) => Trainer::from_checkpoint(&load_checkpoint(path)?, Some(cfg))?,
        None => Trainer::new(cfg)?,
    };
    let final_path = out.join(FINAL_CHECKPOINT_FILE);
    if trainer.is_complete() && resume.is_some() {
        if !final_path.exists() {
            trainer.save(&final_path)?;
        }
        return Ok(RunOutcome {
            status: RunStatus::AlreadyComplete,
            steps: trainer.step,
            final_checkpoint: final_path,
            last: None,
        });
    }
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, serde_json::to_vec_pretty(&trainer.config)?).map_err(|e| Error::io(&cfg_path, e))?;

    // Keep only log lines up to the resumed step so the log mirrors one
    // uninterrupted run.
    let log_path = out.join(LOG_FILE);
    let kept: Vec<String> = match fs::read_to_string(&log_path) {
        Ok(text) if trainer.step > 0 => text
            .lines()
            .filter(|l| serde_json::from_str::<StepLog>(l).map(|s| s.step <= trainer.step).unwrap_or(false))
            .map(str::to_string)
            .collect(),
        _ => Vec::new(),
    };
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    for line in kept {
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
    }

    let total = trainer.config.total_steps();
    let mut last = None;
    while trainer.step < total {
        let entry = trainer.step_once(data)?;
        writeln!(log, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&log_path, e))?;
        let c = &trainer.config;
        if c.log_every > 0 && (entry.step % c.log_every == 0 || entry.step == total) {
            eprintln!(
                "step {:>6}/{total} {:?} lr {:.2e} rec {:.4} vq {:.4} cross {:.4} adv {:.4} ppl {:.1} ({:.2}s)",
                entry.step, entry.phase, entry.lr, entry.l_rec, entry.l_vq, entry.l_cross, entry.l_adv, entry.perplexity, entry.seconds
            );
        }
        if trainer.step == c.steps_3d && c.steps_2d > 0 && c.steps_3d > 0 {
            trainer.save(out.join(PHASE1_CHECKPOINT_FILE))?;
        }
        if c.checkpoint_every > 0 && trainer.step % c.checkpoint_every == 0 {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            trainer.save(out.join(CHECKPOINT_FILE))?;
        }
        last = Some(entry);
    }
    trainer.save(out.join(CHECKPOINT_FILE))?;
    trainer.save(&final_path)?;
    Ok(RunOutcome {
        status: RunStatus::Completed,
        steps: trainer.step,
        final_checkpoint: final_path,
        last,
    })
}
