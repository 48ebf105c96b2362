//! Optimization loop: Adam with decoupled weight decay, a step-decay
//! learning-rate schedule, and a two-stage curriculum — clean scans first,
//! then box-jittered and corrupted scans. Optimizer state serializes to
//! bytes with a checksum, so an interrupted run resumes to a bitwise
//! identical trajectory.
//!
//! Determinism: every random draw in an epoch is keyed by `(config seed,
//! epoch)`, never by a mutable stream carried across epochs. Resuming from a
//! saved [`TrainState`] therefore replays exactly the schedule the
//! uninterrupted run would have seen.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AdError, Gradients, Tape};
use crate::model::{
    AblationFlags, BoundParams, LossBreakdown, LossWeights, Model, ModelError, ParamError,
    ParamStore, SampleTarget,
};
use crate::priorbank::PriorBank;
use crate::seed::{hash_str, mix};
use crate::synthdata::{corrupt_scan, jitter_sample, seed_string, CorruptionParams, ObjectSample};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
/// Momentum for folding refiner batch statistics into running buffers.
pub const STAT_MOMENTUM: f64 = 0.9;

pub const STATE_MAGIC: &[u8; 4] = b"PFTS";
const STATE_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("train split is empty")]
    EmptyTrainSplit,
    #[error("non-finite gradient for parameter '{0}'; step aborted")]
    NonFiniteGradient(String),
    #[error("gradient for '{name}' has {got} values, parameter has {expected}")]
    GradientShape {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("train state: {0}")]
    State(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

// ---------------------------------------------------------------------------
// Configuration

/// Hyperparameters for one training run. Loss weights and ablation flags are
/// carried here so a run's config file fully determines the model it trains;
/// [`train`] checks them against the model it is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Multiplicative learning-rate decay applied every `lr_decay_epochs`.
    pub lr_decay: f64,
    pub lr_decay_epochs: usize,
    /// Stage-1 epochs on clean, uncorrupted scans.
    pub pretrain_epochs: usize,
    /// Stage-2 epochs with per-epoch box jitter and scan corruption.
    pub finetune_epochs: usize,
    /// Gradient clip on the global L2 norm across all parameters; 0 disables.
    pub grad_clip: f64,
    /// Box-jitter amplitude in stage 2, as a fraction of the grid side.
    pub jitter_fraction: f64,
    pub resolution: usize,
    #[serde(with = "seed_string")]
    pub seed: u64,
    pub corruption: CorruptionParams,
    pub loss_weights: LossWeights,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 24,
            learning_rate: 0.001,
            weight_decay: 0.01,
            lr_decay: 0.8,
            lr_decay_epochs: 8,
            pretrain_epochs: 20,
            finetune_epochs: 10,
            grad_clip: 10.0,
            jitter_fraction: 0.1,
            resolution: 32,
            seed: 0,
            corruption: CorruptionParams::default(),
            loss_weights: LossWeights::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.pretrain_epochs + self.finetune_epochs
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} must be in (0, 1]", self.lr_decay));
        }
        if self.lr_decay_epochs == 0 {
            return bad("lr_decay_epochs must be at least 1".into());
        }
        if self.total_epochs() == 0 {
            return bad("schedule has zero epochs".into());
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return bad(format!("grad_clip {} must be non-negative", self.grad_clip));
        }
        if !(0.0..=0.5).contains(&self.jitter_fraction) {
            return bad(format!(
                "jitter_fraction {} must be in [0, 0.5]",
                self.jitter_fraction
            ));
        }
        if !matches!(self.resolution, 16 | 32 | 64) {
            return bad(format!("resolution {} not one of 16/32/64", self.resolution));
        }
        self.corruption.validate().map_err(TrainError::Config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("train config serializes")
    }

    pub fn from_toml_str(s: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig =
            toml::from_str(s).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        write_file(path, self.to_toml_string().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_toml_str(&read_file_string(path)?)
    }
}

/// Learning rate at `epoch`: base rate decayed by `lr_decay` once per
/// completed `lr_decay_epochs` block.
pub fn lr_schedule(config: &TrainConfig, epoch: usize) -> f64 {
    config.learning_rate * config.lr_decay.powi((epoch / config.lr_decay_epochs) as i32)
}

// ---------------------------------------------------------------------------
// Optimizer state

#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub first: Vec<f32>,
    pub second: Vec<f32>,
}

/// Everything that persists across an interrupted run besides the parameters
/// themselves. Epoch-level randomness is re-derived from `(seed, epoch)`, so
/// no RNG stream state needs to be stored for an exact resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs; training resumes from this index.
    pub epochs_done: usize,
    /// Optimizer steps taken; Adam's bias-correction time index.
    pub step: u64,
    /// Lowest validation total seen so far; +inf before the first epoch.
    pub best_val: f64,
    pub best_epoch: Option<usize>,
    moments: BTreeMap<String, AdamMoments>,
}

impl Default for TrainState {
    fn default() -> Self {
        TrainState::new()
    }
}

impl TrainState {
    pub fn new() -> TrainState {
        TrainState {
            epochs_done: 0,
            step: 0,
            best_val: f64::INFINITY,
            best_epoch: None,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self) -> &BTreeMap<String, AdamMoments> {
        &self.moments
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&STATE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.epochs_done as u64).to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.best_val.to_le_bytes());
        match self.best_epoch {
            Some(e) => {
                out.push(1);
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            None => {
                out.push(0);
                out.extend_from_slice(&0u64.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.moments.len() as u32).to_le_bytes());
        for (name, m) in &self.moments {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.first.len() as u32).to_le_bytes());
            for &v in &m.first {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for &v in &m.second {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TrainState, TrainError> {
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8], TrainError> {
            if *off + n > bytes.len() {
                return Err(TrainError::State(format!(
                    "truncated at byte {} (needed {} more)",
                    *off,
                    *off + n - bytes.len()
                )));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 4)? != STATE_MAGIC {
            return Err(TrainError::State("bad magic".into()));
        }
        let version = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap());
        if version != STATE_VERSION {
            return Err(TrainError::State(format!("unsupported version {version}")));
        }
        let epochs_done = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
        let step = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        let best_val = f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        let has_best = take(&mut off, 1)?[0] != 0;
        let best_raw = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        let best_epoch = has_best.then_some(best_raw as usize);
        let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let mut moments = BTreeMap::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut off, name_len)?)
                .map_err(|_| TrainError::State("parameter name is not UTF-8".into()))?
                .to_string();
            let len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
            let read_f32s = |off: &mut usize| -> Result<Vec<f32>, TrainError> {
                Ok(take(off, len * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect())
            };
            let first = read_f32s(&mut off)?;
            let second = read_f32s(&mut off)?;
            if moments.insert(name.clone(), AdamMoments { first, second }).is_some() {
                return Err(TrainError::State(format!("duplicate moments for '{name}'")));
            }
        }
        let digest_start = off;
        let stored: [u8; 32] = take(&mut off, 32)?.try_into().unwrap();
        let computed: [u8; 32] = Sha256::digest(&bytes[..digest_start]).into();
        if stored != computed {
            return Err(TrainError::State("checksum mismatch".into()));
        }
        if off != bytes.len() {
            return Err(TrainError::State(format!(
                "{} trailing bytes",
                bytes.len() - off
            )));
        }
        Ok(TrainState {
            epochs_done,
            step,
            best_val,
            best_epoch,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<TrainState, TrainError> {
        Self::from_bytes(&read_file(path)?)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    std::fs::write(path, bytes).map_err(|e| TrainError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>, TrainError> {
    std::fs::read(path).map_err(|e| TrainError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_file_string(path: &Path) -> Result<String, TrainError> {
    std::fs::read_to_string(path).map_err(|e| TrainError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

// ---------------------------------------------------------------------------
// Adam

/// One Adam step with decoupled weight decay (`w -= lr·wd·w` before the
/// moment update) and bias-corrected moments. Gradients are clipped to
/// `grad_clip` global L2 norm first. Parameters absent from `grads` keep
/// their values and moments. The whole gradient map is validated before any
/// parameter is touched, so an error leaves `params` and `state` unchanged.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut TrainState,
    lr: f64,
    weight_decay: f64,
    grad_clip: f64,
) -> Result<(), TrainError> {
    let mut sq_norm = 0.0f64;
    for (name, g) in grads {
        let p = params.get(name)?;
        if !p.trainable {
            return Err(TrainError::Config(format!(
                "gradient supplied for non-trainable parameter '{name}'"
            )));
        }
        if g.len() != p.values.len() {
            return Err(TrainError::GradientShape {
                name: name.clone(),
                expected: p.values.len(),
                got: g.len(),
            });
        }
        for &v in g {
            if !v.is_finite() {
                return Err(TrainError::NonFiniteGradient(name.clone()));
            }
            sq_norm += v * v;
        }
        if let Some(m) = state.moments.get(name) {
            if m.first.len() != g.len() {
                return Err(TrainError::State(format!(
                    "moments for '{name}' have {} values, gradient has {}",
                    m.first.len(),
                    g.len()
                )));
            }
        }
    }
    let norm = sq_norm.sqrt();
    let scale = if grad_clip > 0.0 && norm > grad_clip {
        grad_clip / norm
    } else {
        1.0
    };
    let t = state.step + 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let m = state.moments.entry(name.clone()).or_insert_with(|| AdamMoments {
            first: vec![0.0; g.len()],
            second: vec![0.0; g.len()],
        });
        for i in 0..g.len() {
            let w = p.values[i] as f64 * (1.0 - lr * weight_decay);
            let gi = g[i] * scale;
            let m1 = ADAM_BETA1 * m.first[i] as f64 + (1.0 - ADAM_BETA1) * gi;
            let m2 = ADAM_BETA2 * m.second[i] as f64 + (1.0 - ADAM_BETA2) * gi * gi;
            m.first[i] = m1 as f32;
            m.second[i] = m2 as f32;
            let update = lr * (m1 / bc1) / ((m2 / bc2).sqrt() + ADAM_EPSILON);
            p.values[i] = (w - update) as f32;
        }
    }
    state.step = t;
    Ok(())
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// One epoch's record in the metric log. Train/val terms are per-sample
/// means. Validation reuses the training forward pass (batch statistics come
/// from the sample itself, running buffers stay frozen), so the number
/// tracks the optimized objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f64,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
}

#[derive(Serialize, Deserialize)]
struct EpochLogFile {
    epoch: Vec<EpochLog>,
}

impl EpochLog {
    /// One `[[epoch]]` TOML block; concatenated blocks form an append-only
    /// metric log that [`EpochLog::parse_log`] reads back.
    pub fn to_toml_block(&self) -> String {
        toml::to_string(&EpochLogFile { epoch: vec![*self] }).expect("epoch log serializes")
    }

    pub fn parse_log(s: &str) -> Result<Vec<EpochLog>, TrainError> {
        let file: EpochLogFile =
            toml::from_str(s).map_err(|e| TrainError::State(format!("metric log: {e}")))?;
        Ok(file.epoch)
    }
}

#[derive(Debug)]
pub struct TrainReport {
    pub logs: Vec<EpochLog>,
    /// Parameter snapshot at the best validation total reached during this
    /// invocation; `None` when no epoch improved on the incoming state's
    /// best (the caller keeps its existing snapshot).
    pub best_params: Option<ParamStore>,
}

/// Runs the schedule from `state.epochs_done` to completion, mutating the
/// model's parameters in place. Pass a fresh [`TrainState`] to start over, or
/// a loaded one (with the matching parameter checkpoint already in `model`)
/// to resume; the continuation is bitwise identical to an uninterrupted run.
///
/// Stage 1 trains on the samples as given. Stage 2 redraws box jitter and
/// scan corruption every epoch, keyed by `(seed, epoch)`. Batches are formed
/// from a per-epoch shuffle; gradients within a batch are averaged in sample
/// order, and refiner batch statistics are folded in the same order after
/// each optimizer step.
///
/// `on_epoch` runs after each epoch with the log record, the parameters, and
/// the already-advanced state — everything a caller needs to append a metric
/// line and write resumable checkpoints. Its error aborts the run.
pub fn train(
    model: &mut Model,
    bank: &PriorBank,
    train_set: &[ObjectSample],
    val_set: &[ObjectSample],
    config: &TrainConfig,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&EpochLog, &ParamStore, &TrainState) -> Result<(), TrainError>,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    if bank.resolution() != config.resolution {
        return Err(TrainError::Config(format!(
            "bank resolution {} vs config resolution {}",
            bank.resolution(),
            config.resolution
        )));
    }
    if model.config.resolution != config.resolution {
        return Err(TrainError::Config(format!(
            "model resolution {} vs config resolution {}",
            model.config.resolution, config.resolution
        )));
    }
    if model.config.ablation != config.ablation {
        return Err(TrainError::Config(
            "ablation flags differ between model and train config".into(),
        ));
    }
    if model.config.loss_weights != config.loss_weights {
        return Err(TrainError::Config(
            "loss weights differ between model and train config".into(),
        ));
    }
    for s in train_set.iter().chain(val_set) {
        if s.scan.resolution() != config.resolution {
            return Err(TrainError::Config(format!(
                "sample resolution {} vs config resolution {}",
                s.scan.resolution(),
                config.resolution
            )));
        }
    }
    if state.epochs_done > config.total_epochs() {
        return Err(TrainError::Config(format!(
            "state has {} epochs done, schedule has {}",
            state.epochs_done,
            config.total_epochs()
        )));
    }

    let has_coarse = !config.ablation.no_priors;
    let mut report = TrainReport {
        logs: Vec::new(),
        best_params: None,
    };
    for epoch in state.epochs_done..config.total_epochs() {
        let lr = lr_schedule(config, epoch);
        let stage = if epoch < config.pretrain_epochs {
            Stage::Pretrain
        } else {
            Stage::Finetune
        };
        let storage: Vec<ObjectSample>;
        let epoch_samples: Vec<&ObjectSample> = match stage {
            Stage::Pretrain => train_set.iter().collect(),
            Stage::Finetune => {
                let jitter_seed = mix(&[config.seed, epoch as u64, hash_str("trainer.jitter")]);
                let corruption = CorruptionParams {
                    seed: mix(&[config.corruption.seed, config.seed, epoch as u64]),
                    ..config.corruption.clone()
                };
                storage = train_set
                    .iter()
                    .map(|s| {
                        let jittered = jitter_sample(s, config.jitter_fraction, jitter_seed);
                        corrupt_scan(&jittered, &corruption)
                    })
                    .collect();
                storage.iter().collect()
            }
        };

        let mut order: Vec<usize> = (0..epoch_samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[
            config.seed,
            epoch as u64,
            hash_str("trainer.shuffle"),
        ]));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        // Samples within a batch run in parallel; each owns its tape, so
        // per-sample results are bitwise fixed, and the reduction below is in
        // sample order — the step is identical at any thread count.
        let mut train_sum = LossBreakdown::zero(has_coarse);
        for chunk in order.chunks(config.batch_size) {
            let per_sample: Result<Vec<_>, TrainError> = chunk
                .par_iter()
                .map(|&idx| {
                    let sample = epoch_samples[idx];
                    let mut tape = Tape::<f32>::new();
                    let bound = BoundParams::bind(&mut tape, &model.params)?;
                    let target = SampleTarget {
                        scan: &sample.scan,
                        rotation: sample.rotation,
                        tree: &sample.tree,
                    };
                    let fwd = model.training_losses(&mut tape, &bound, &target, bank, None)?;
                    let grads = tape.backward(fwd.total)?;
                    let mut sample_grads = BTreeMap::new();
                    add_sample_grads(&mut sample_grads, &model.params, &bound, &grads);
                    Ok((sample_grads, fwd.stats, fwd.breakdown))
                })
                .collect();
            let mut grad_acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut stats_acc = Vec::new();
            for (sample_grads, stats, breakdown) in per_sample? {
                for (name, g) in sample_grads {
                    match grad_acc.entry(name) {
                        std::collections::btree_map::Entry::Vacant(e) => {
                            e.insert(g);
                        }
                        std::collections::btree_map::Entry::Occupied(mut e) => {
                            for (a, b) in e.get_mut().iter_mut().zip(g) {
                                *a += b;
                            }
                        }
                    }
                }
                stats_acc.extend(stats);
                train_sum.accumulate(&breakdown);
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in grad_acc.values_mut() {
                for v in g.iter_mut() {
                    *v *= inv;
                }
            }
            adam_step(
                &mut model.params,
                &grad_acc,
                state,
                lr,
                config.weight_decay,
                config.grad_clip,
            )?;
            model.fold_batch_stats(&stats_acc, STAT_MOMENTUM)?;
        }
        train_sum.scale(1.0 / epoch_samples.len() as f64);

        // An empty validation split falls back to the train mean so
        // best-checkpoint selection still works on overfit runs.
        let val = if val_set.is_empty() {
            train_sum
        } else {
            let breakdowns: Result<Vec<_>, TrainError> = val_set
                .par_iter()
                .map(|sample| {
                    let mut tape = Tape::<f32>::new();
                    let bound = BoundParams::bind(&mut tape, &model.params)?;
                    let target = SampleTarget {
                        scan: &sample.scan,
                        rotation: sample.rotation,
                        tree: &sample.tree,
                    };
                    let fwd = model.training_losses(&mut tape, &bound, &target, bank, None)?;
                    Ok(fwd.breakdown)
                })
                .collect();
            let mut sum = LossBreakdown::zero(has_coarse);
            for breakdown in breakdowns? {
                sum.accumulate(&breakdown);
            }
            sum.scale(1.0 / val_set.len() as f64);
            sum
        };

        if val.total < state.best_val {
            state.best_val = val.total;
            state.best_epoch = Some(epoch);
            report.best_params = Some(model.params.clone());
        }
        state.epochs_done = epoch + 1;
        let log = EpochLog {
            epoch,
            stage,
            lr,
            train: train_sum,
            val,
        };
        on_epoch(&log, &model.params, state)?;
        report.logs.push(log);
    }
    Ok(report)
}

/// Adds this sample's gradients (for every trainable parameter the loss
/// actually reached) into the batch accumulator, in f64.
fn add_sample_grads(
    acc: &mut BTreeMap<String, Vec<f64>>,
    store: &ParamStore,
    bound: &BoundParams,
    grads: &Gradients<f32>,
) {
    for name in store.trainable_names() {
        if let Some(g) = grads.get(bound.id(&name)) {
            let slot = acc
                .entry(name)
                .or_insert_with(|| vec![0.0; g.len()]);
            for (a, &b) in slot.iter_mut().zip(g) {
                *a += b as f64;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{test_config, tiny_bank};
    use crate::model::Matching;
    use crate::synthdata::generate_shape;
    use crate::taxonomy::Taxonomy;

    fn scalar_store(name: &str, value: f32) -> ParamStore {
        let mut store = ParamStore::new();
        store.insert(name, &[1], vec![value], true).unwrap();
        store
    }

    fn grads_for(entries: &[(&str, Vec<f64>)]) -> BTreeMap<String, Vec<f64>> {
        entries
            .iter()
            .map(|(n, g)| (n.to_string(), g.clone()))
            .collect()
    }

    #[test]
    fn lr_schedule_follows_step_decay() {
        let config = TrainConfig::default();
        assert!((lr_schedule(&config, 0) - 0.001).abs() < 1e-12);
        assert!((lr_schedule(&config, 7) - 0.001).abs() < 1e-12);
        assert!((lr_schedule(&config, 8) - 0.0008).abs() < 1e-12);
        assert!((lr_schedule(&config, 16) - 0.00064).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for epoch in 0..100 {
            let lr = lr_schedule(&config, epoch);
            assert!(lr <= prev && lr > 0.0);
            prev = lr;
        }
    }

    #[test]
    fn zero_gradient_zero_decay_is_a_fixed_point() {
        let mut store = ParamStore::new();
        store
            .insert("w", &[3], vec![0.5, -1.25, 2.0], true)
            .unwrap();
        let reference = store.clone();
        let mut state = TrainState::new();
        let grads = grads_for(&[("w", vec![0.0, 0.0, 0.0])]);
        for _ in 0..5 {
            adam_step(&mut store, &grads, &mut state, 0.001, 0.0, 10.0).unwrap();
        }
        assert!(store.bit_eq(&reference));
        assert_eq!(state.step, 5);
    }

    #[test]
    fn first_step_magnitude_is_the_learning_rate() {
        // Bias correction makes both moment estimates exactly 1 after one
        // step on a unit gradient, so the update is lr/(1+eps).
        let mut store = scalar_store("w", 0.0);
        let mut state = TrainState::new();
        let grads = grads_for(&[("w", vec![1.0])]);
        adam_step(&mut store, &grads, &mut state, 0.001, 0.0, 10.0).unwrap();
        let expected = -0.001 / (1.0 + ADAM_EPSILON);
        let got = store.get("w").unwrap().values[0] as f64;
        assert!((got - expected).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn adam_converges_on_a_quadratic_bowl() {
        let mut store = scalar_store("x", 1.0);
        let mut state = TrainState::new();
        for _ in 0..200 {
            let x = store.get("x").unwrap().values[0] as f64;
            let grads = grads_for(&[("x", vec![2.0 * x])]);
            adam_step(&mut store, &grads, &mut state, 0.02, 0.0, 10.0).unwrap();
        }
        let x = store.get("x").unwrap().values[0];
        assert!(x.abs() < 1e-2, "|x| = {}", x.abs());
    }

    #[test]
    fn non_finite_gradient_aborts_before_any_mutation() {
        let mut store = ParamStore::new();
        store.insert("a", &[1], vec![1.0], true).unwrap();
        store.insert("b", &[1], vec![2.0], true).unwrap();
        let reference = store.clone();
        let mut state = TrainState::new();
        let grads = grads_for(&[("a", vec![f64::NAN]), ("b", vec![1.0])]);
        let err = adam_step(&mut store, &grads, &mut state, 0.001, 0.01, 10.0).unwrap_err();
        match err {
            TrainError::NonFiniteGradient(name) => assert_eq!(name, "a"),
            other => panic!("unexpected error {other:?}"),
        }
        assert!(store.bit_eq(&reference));
        assert_eq!(state.step, 0);
        assert!(state.moments().is_empty());
    }

    #[test]
    fn clipping_equals_prescaled_gradients() {
        // Norm 50 clipped to 10 must match feeding gradients pre-scaled by
        // 0.2 (norm exactly 10, which the strict > test leaves untouched).
        let mut clipped = ParamStore::new();
        clipped.insert("w", &[2], vec![0.0, 0.0], true).unwrap();
        let mut manual = clipped.clone();
        let mut state_a = TrainState::new();
        let mut state_b = TrainState::new();
        adam_step(
            &mut clipped,
            &grads_for(&[("w", vec![30.0, 40.0])]),
            &mut state_a,
            0.01,
            0.0,
            10.0,
        )
        .unwrap();
        adam_step(
            &mut manual,
            &grads_for(&[("w", vec![6.0, 8.0])]),
            &mut state_b,
            0.01,
            0.0,
            10.0,
        )
        .unwrap();
        assert!(clipped.bit_eq(&manual));
        assert_eq!(state_a.moments(), state_b.moments());
    }

    #[test]
    fn weight_decay_shrinks_before_the_moment_update() {
        // With a zero gradient the moments stay zero, so the only movement
        // is the decoupled decay factor (1 - lr*wd) per step.
        let mut store = scalar_store("w", 1.0);
        let mut state = TrainState::new();
        let grads = grads_for(&[("w", vec![0.0])]);
        adam_step(&mut store, &grads, &mut state, 0.1, 0.5, 10.0).unwrap();
        let got = store.get("w").unwrap().values[0] as f64;
        assert!((got - 0.95).abs() < 1e-6);
        adam_step(&mut store, &grads, &mut state, 0.1, 0.5, 10.0).unwrap();
        let got = store.get("w").unwrap().values[0] as f64;
        assert!((got - 0.9025).abs() < 1e-6);
    }

    #[test]
    fn updates_do_not_depend_on_insertion_order() {
        let mut forward = ParamStore::new();
        forward.insert("a", &[1], vec![1.0], true).unwrap();
        forward.insert("b", &[1], vec![-1.0], true).unwrap();
        let mut reversed = ParamStore::new();
        reversed.insert("b", &[1], vec![-1.0], true).unwrap();
        reversed.insert("a", &[1], vec![1.0], true).unwrap();
        let grads_fwd = grads_for(&[("a", vec![0.3]), ("b", vec![-0.7])]);
        let grads_rev = grads_for(&[("b", vec![-0.7]), ("a", vec![0.3])]);
        let mut state_a = TrainState::new();
        let mut state_b = TrainState::new();
        adam_step(&mut forward, &grads_fwd, &mut state_a, 0.01, 0.01, 10.0).unwrap();
        adam_step(&mut reversed, &grads_rev, &mut state_b, 0.01, 0.01, 10.0).unwrap();
        assert!(forward.bit_eq(&reversed));
        assert_eq!(state_a, state_b);
    }

    #[test]
    fn state_bytes_roundtrip_and_detect_corruption() {
        let mut state = TrainState::new();
        state.epochs_done = 7;
        state.step = 123;
        state.best_val = 0.25;
        state.best_epoch = Some(5);
        state.moments.insert(
            "encoder.w".into(),
            AdamMoments {
                first: vec![0.1, -0.2],
                second: vec![0.01, 0.04],
            },
        );
        state.moments.insert(
            "head.b".into(),
            AdamMoments {
                first: vec![0.0],
                second: vec![1.5],
            },
        );
        let bytes = state.to_bytes();
        let back = TrainState::from_bytes(&bytes).unwrap();
        assert_eq!(state, back);

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(TrainState::from_bytes(&flipped).is_err());
        assert!(TrainState::from_bytes(&bytes[..bytes.len() - 3]).is_err());

        let fresh = TrainState::new();
        let back = TrainState::from_bytes(&fresh.to_bytes()).unwrap();
        assert_eq!(fresh, back);
        assert!(back.best_val.is_infinite());
    }

    #[test]
    fn config_validation_rejects_bad_rates() {
        assert!(TrainConfig::default().validate().is_ok());
        let cases: Vec<(&str, Box<dyn Fn(&mut TrainConfig)>)> = vec![
            ("zero lr", Box::new(|c| c.learning_rate = 0.0)),
            ("negative wd", Box::new(|c| c.weight_decay = -0.1)),
            ("zero decay", Box::new(|c| c.lr_decay = 0.0)),
            ("decay above 1", Box::new(|c| c.lr_decay = 1.5)),
            ("zero batch", Box::new(|c| c.batch_size = 0)),
            ("bad resolution", Box::new(|c| c.resolution = 17)),
            ("jitter above half", Box::new(|c| c.jitter_fraction = 0.6)),
            (
                "zero epochs",
                Box::new(|c| {
                    c.pretrain_epochs = 0;
                    c.finetune_epochs = 0;
                }),
            ),
            (
                "bad corruption",
                Box::new(|c| c.corruption.crop_probability = 1.5),
            ),
        ];
        for (label, tweak) in cases {
            let mut config = TrainConfig::default();
            tweak(&mut config);
            assert!(
                matches!(config.validate(), Err(TrainError::Config(_))),
                "{label} accepted"
            );
        }
    }

    #[test]
    fn config_toml_roundtrip_keeps_every_field() {
        let mut config = TrainConfig {
            batch_size: 3,
            seed: u64::MAX - 5,
            pretrain_epochs: 2,
            finetune_epochs: 1,
            resolution: 16,
            ..TrainConfig::default()
        };
        config.ablation.no_refine = true;
        config.corruption.seed = u64::MAX;
        let text = config.to_toml_string();
        let back = TrainConfig::from_toml_str(&text).unwrap();
        assert_eq!(config, back);
        // Partial files take defaults; unknown keys are typos and must fail.
        let partial = TrainConfig::from_toml_str("batch_size = 4\n").unwrap();
        assert_eq!(partial.learning_rate, 0.001);
        assert_eq!(partial.batch_size, 4);
        assert!(TrainConfig::from_toml_str("batchsize = 4\n").is_err());
    }

    #[test]
    fn epoch_log_blocks_concatenate_into_a_parseable_log() {
        let log0 = EpochLog {
            epoch: 0,
            stage: Stage::Pretrain,
            lr: 0.001,
            train: LossBreakdown::zero(true),
            val: LossBreakdown::zero(true),
        };
        let mut log1 = log0;
        log1.epoch = 1;
        log1.stage = Stage::Finetune;
        let block0 = log0.to_toml_block();
        assert!(block0.starts_with("[[epoch]]"));
        let joined = format!("{block0}{}", log1.to_toml_block());
        let parsed = EpochLog::parse_log(&joined).unwrap();
        assert_eq!(parsed, vec![log0, log1]);
    }

    // -- Training-loop tests on a small real model ---------------------------

    fn chair_set(count: usize, resolution: usize) -> Vec<ObjectSample> {
        let taxonomy = Taxonomy::builtin();
        (0..count)
            .map(|i| generate_shape(0, &taxonomy, 1000 + i as u64, resolution))
            .collect()
    }

    fn small_model(ablation: AblationFlags) -> (Model, PriorBank) {
        let bank = tiny_bank(16, 1, &[0, 1, 2, 3]);
        let mut config = test_config(16, &bank);
        config.ablation = ablation;
        let model = Model::new(config, &Taxonomy::builtin(), &bank, 11).unwrap();
        (model, bank)
    }

    fn small_train_config(ablation: AblationFlags) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            pretrain_epochs: 3,
            finetune_epochs: 0,
            resolution: 16,
            seed: 5,
            ablation,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_reduces_loss_on_a_small_clean_set() {
        let (mut model, bank) = small_model(AblationFlags::default());
        let fresh_params = model.params.clone();
        let samples = chair_set(4, 16);
        let config = small_train_config(AblationFlags::default());
        let mut state = TrainState::new();
        let mut seen = 0usize;
        let report = train(
            &mut model,
            &bank,
            &samples,
            &[],
            &config,
            &mut state,
            |_, _, _| {
                seen += 1;
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(seen, 3);
        assert_eq!(report.logs.len(), 3);
        assert!(
            report.logs[2].train.total < report.logs[0].train.total,
            "loss did not fall: {} -> {}",
            report.logs[0].train.total,
            report.logs[2].train.total
        );
        assert_eq!(state.epochs_done, 3);
        assert!(state.best_epoch.is_some());
        assert!(report.best_params.is_some());
        // Running statistics moved, so batch folds really happened.
        let moved = model.params.iter().any(|(name, p)| {
            name.ends_with(".running_mean")
                && p.values != fresh_params.get(name).unwrap().values
        });
        assert!(moved);
    }

    #[test]
    fn resume_midway_matches_the_uninterrupted_run() {
        let full = TrainConfig {
            batch_size: 2,
            pretrain_epochs: 2,
            finetune_epochs: 2,
            resolution: 16,
            seed: 9,
            ..TrainConfig::default()
        };
        let samples = chair_set(2, 16);
        let val = chair_set(1, 16);

        let (mut model_a, bank) = small_model(AblationFlags::default());
        let mut state_a = TrainState::new();
        let mut logs_a = String::new();
        train(&mut model_a, &bank, &samples, &val, &full, &mut state_a, |l, _, _| {
            logs_a.push_str(&l.to_toml_block());
            Ok(())
        })
        .unwrap();

        // Same schedule, stopped after two epochs, serialized, resumed.
        let (mut model_b, _) = small_model(AblationFlags::default());
        let mut first_half = full.clone();
        first_half.pretrain_epochs = 2;
        first_half.finetune_epochs = 0;
        let mut state_b = TrainState::new();
        let mut logs_b = String::new();
        train(
            &mut model_b,
            &bank,
            &samples,
            &val,
            &first_half,
            &mut state_b,
            |l, _, _| {
                logs_b.push_str(&l.to_toml_block());
                Ok(())
            },
        )
        .unwrap();
        let state_bytes = state_b.to_bytes();
        let param_bytes = model_b.params.to_bytes();

        let (mut model_c, _) = small_model(AblationFlags::default());
        model_c.params = ParamStore::from_bytes(&param_bytes).unwrap();
        let mut state_c = TrainState::from_bytes(&state_bytes).unwrap();
        assert_eq!(state_c.epochs_done, 2);
        train(&mut model_c, &bank, &samples, &val, &full, &mut state_c, |l, _, _| {
            logs_b.push_str(&l.to_toml_block());
            Ok(())
        })
        .unwrap();

        assert!(model_a.params.bit_eq(&model_c.params));
        assert_eq!(state_a, state_c);
        assert_eq!(logs_a, logs_b);
    }

    #[test]
    fn disabled_priors_drop_the_coarse_term() {
        let flags = AblationFlags {
            no_priors: true,
            ..AblationFlags::default()
        };
        let (mut model, bank) = small_model(flags.clone());
        let samples = chair_set(2, 16);
        let mut config = small_train_config(flags);
        config.pretrain_epochs = 1;
        let mut state = TrainState::new();
        let report = train(
            &mut model,
            &bank,
            &samples,
            &[],
            &config,
            &mut state,
            |_, _, _| Ok(()),
        )
        .unwrap();
        assert!(report.logs[0].train.coarse.is_none());
        assert!(report.logs[0].val.coarse.is_none());

        let (mut plain, bank) = small_model(AblationFlags::default());
        let config = TrainConfig {
            pretrain_epochs: 1,
            finetune_epochs: 0,
            ..small_train_config(AblationFlags::default())
        };
        let report = train(
            &mut plain,
            &bank,
            &samples,
            &[],
            &config,
            &mut TrainState::new(),
            |_, _, _| Ok(()),
        )
        .unwrap();
        assert!(report.logs[0].train.coarse.is_some());
    }

    #[test]
    fn empty_train_split_is_an_error() {
        let (mut model, bank) = small_model(AblationFlags::default());
        let config = small_train_config(AblationFlags::default());
        let err = train(
            &mut model,
            &bank,
            &[],
            &[],
            &config,
            &mut TrainState::new(),
            |_, _, _| Ok(()),
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::EmptyTrainSplit));
    }

    #[test]
    fn mismatched_model_and_config_are_rejected() {
        let (mut model, bank) = small_model(AblationFlags::default());
        let samples = chair_set(1, 16);
        let mut config = small_train_config(AblationFlags::default());
        config.ablation.no_refine = true;
        let err = train(
            &mut model,
            &bank,
            &samples,
            &[],
            &config,
            &mut TrainState::new(),
            |_, _, _| Ok(()),
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::Config(_)));
    }

    #[test]
    fn ablation_flags_change_only_their_own_loss_terms() {
        // All variants share the base seed, so parameter groups common to
        // two variants are identical and untouched paths must agree exactly.
        let taxonomy = Taxonomy::builtin();
        let sample = generate_shape(0, &taxonomy, 77, 16);
        let target = SampleTarget {
            scan: &sample.scan,
            rotation: sample.rotation,
            tree: &sample.tree,
        };

        let run = |flags: AblationFlags, pin: Option<&Matching>| {
            let bank = tiny_bank(16, 2, &[0, 1, 2, 3]);
            let mut config = test_config(16, &bank);
            config.ablation = flags;
            let model = Model::new(config, &taxonomy, &bank, 11).unwrap();
            let mut tape = Tape::<f32>::new();
            let bound = BoundParams::bind(&mut tape, &model.params).unwrap();
            let fwd = model
                .training_losses(&mut tape, &bound, &target, &bank, pin)
                .unwrap();
            (fwd.breakdown, fwd.matching)
        };

        let (base, matching) = run(AblationFlags::default(), None);
        let pin = Some(&matching);

        let flags = |f: fn(&mut AblationFlags)| {
            let mut a = AblationFlags::default();
            f(&mut a);
            a
        };

        let (no_refine, _) = run(flags(|a| a.no_refine = true), pin);
        assert_eq!(no_refine.semantic, base.semantic);
        assert_eq!(no_refine.existence, base.existence);
        assert_eq!(no_refine.adjacency, base.adjacency);
        assert_eq!(no_refine.orientation, base.orientation);
        assert_eq!(no_refine.coarse, base.coarse);
        assert_ne!(no_refine.final_mask, base.final_mask);

        let (absolute, _) = run(flags(|a| a.refine_absolute = true), pin);
        assert_eq!(absolute.coarse, base.coarse);
        assert_eq!(absolute.semantic, base.semantic);
        assert_ne!(absolute.final_mask, base.final_mask);

        let (additive, _) = run(flags(|a| a.additive_final = true), pin);
        assert_eq!(additive.coarse, base.coarse);
        assert_ne!(additive.final_mask, base.final_mask);

        let (no_mp, _) = run(flags(|a| a.no_message_passing = true), pin);
        // The orientation head reads the scan encoding, upstream of message
        // passing; everything downstream of the tree decoder moves.
        assert_eq!(no_mp.orientation, base.orientation);
        assert_ne!(no_mp.semantic, base.semantic);

        let (no_priors, _) = run(flags(|a| a.no_priors = true), pin);
        assert_eq!(no_priors.orientation, base.orientation);
        assert_eq!(no_priors.semantic, base.semantic);
        assert_eq!(no_priors.existence, base.existence);
        assert_eq!(no_priors.adjacency, base.adjacency);
        assert!(no_priors.coarse.is_none());
        assert_ne!(no_priors.final_mask, base.final_mask);
    }
}
