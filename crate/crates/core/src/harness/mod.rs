//! Training, evaluation sweeps and run persistence.

mod io;
mod sweep;

pub use io::{
    read_metrics_csv, read_ood_csv, read_sweep_csv, write_metrics_csv, write_ood_csv, write_run, write_sweep_csv,
    MANIFEST_SCHEMA,
};
pub use sweep::{length_sweep, ood_sweep, sample_size_sweep, OodRow, SweepRow};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::par::Execution;
use crate::tasks::{sample_train_with, LengthMode, TaskBatch, TaskError, TaskKind, TRAIN_BOUND};
use crate::tensor::{adam_step, AdamState, TensorError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub train_samples: usize,
    pub val_samples: usize,
    /// Training values are drawn within `[-range_bound, range_bound]`.
    pub range_bound: f64,
    /// Train on lengths `1..=n` instead of exactly `n`.
    pub variable_length: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            train_samples: 30_000,
            val_samples: 1_000,
            range_bound: TRAIN_BOUND,
            variable_length: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    /// Final learning rate of the cosine schedule.
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-4,
            lr_min: 1e-6,
            epochs: 2000,
            batch_size: 256,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    /// Cosine decay from `lr` to `lr_min` over `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total == 0 {
            return self.lr;
        }
        let t = step.min(total) as f64 / total as f64;
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(task: TaskKind, model: ModelConfig, seed: u64) -> Self {
        TrainConfig {
            task,
            model,
            sampler: SamplerConfig::default(),
            optimizer: OptimizerConfig::default(),
            seed,
        }
    }

    pub fn lengths(&self) -> LengthMode {
        if self.sampler.variable_length {
            LengthMode::Variable(self.model.max_len)
        } else {
            LengthMode::Fixed(self.model.max_len)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optimizer;
        if o.batch_size == 0 || self.sampler.train_samples == 0 || self.sampler.val_samples == 0 {
            return Err(HarnessError::Config("batch size and sample counts must be positive".into()));
        }
        if !(o.lr > 0.0) || o.lr_min < 0.0 || o.lr_min > o.lr {
            return Err(HarnessError::Config(format!("need 0 <= lr_min <= lr, lr > 0; got {o:?}")));
        }
        Ok(())
    }
}

/// Independent seeds for the parts of a run.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Seeds {
    pub init: u64,
    pub train: u64,
    pub val: u64,
    pub shuffle: u64,
    pub eval: u64,
}

impl Seeds {
    pub fn derive(seed: u64) -> Self {
        let mix = |k: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k.wrapping_mul(0xBF58_476D_1CE4_E5B9));
        Seeds {
            init: mix(1),
            train: mix(2),
            val: mix(3),
            shuffle: mix(4),
            eval: mix(5),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub code_version: String,
    pub config: TrainConfig,
    pub status: RunStatus,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    #[serde(default)]
    pub ood: Vec<OodRow>,
    pub checkpoint: Option<String>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn failed(&self) -> bool {
        matches!(self.status, RunStatus::Failed { .. })
    }
}

/// A finished run: its manifest and best-validation parameters.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub manifest: RunManifest,
    pub best: ModelParams,
}

/// Mean squared error over all entries of `batch`, evaluated in chunks.
pub fn evaluate(params: &ModelParams, batch: &TaskBatch, exec: Execution) -> Result<f64> {
    let mut sq = 0.0;
    let mut count = 0usize;
    for chunk in (0..batch.len()).collect::<Vec<_>>().chunks(1024) {
        let sub = batch.select(chunk);
        let pred = params.predict(&sub.inputs, exec)?;
        for (p, t) in pred.iter().zip(&sub.targets) {
            for (a, b) in p.iter().zip(t) {
                sq += (a - b) * (a - b);
            }
            count += t.len();
        }
    }
    Ok(sq / count.max(1) as f64)
}

/// Loss and gradients of a minibatch that may mix lengths, weighted by entry count.
fn minibatch_step(params: &ModelParams, batch: &TaskBatch, exec: Execution) -> Result<(f64, Vec<Vec<f64>>)> {
    let total: usize = batch.targets.iter().map(Vec::len).sum();
    let mut loss = 0.0;
    let mut grads: Option<Vec<Vec<f64>>> = None;
    for group in batch.group_by_length() {
        let count: usize = group.targets.iter().map(Vec::len).sum();
        let w = count as f64 / total as f64;
        let (l, g) = params.loss_and_grads(&group.inputs, &group.targets, true, exec)?;
        let g = g.expect("requested gradients");
        loss += w * l;
        match grads.as_mut() {
            None => grads = Some(g.into_iter().map(|v| v.into_iter().map(|x| w * x).collect()).collect()),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += w * y;
                    }
                }
            }
        }
    }
    Ok((loss, grads.unwrap_or_default()))
}

/// Trains with Adam and a cosine schedule, keeping the best-validation parameters.
///
/// Epoch 0 holds the metrics of the initial parameters; later epochs report
/// the mean minibatch loss and the validation MSE after the epoch.
pub fn train(config: &TrainConfig, exec: Execution) -> Result<TrainedRun> {
    train_with_progress(config, exec, |_| {})
}

pub fn train_with_progress(
    config: &TrainConfig,
    exec: Execution,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<TrainedRun> {
    config.validate()?;
    let start = Instant::now();
    let seeds = Seeds::derive(config.seed);
    let s = &config.sampler;
    let o = &config.optimizer;
    let lengths = config.lengths();
    let train_set = sample_train_with(config.task, s.train_samples, s.range_bound, lengths, seeds.train, exec);
    let val_set = sample_train_with(config.task, s.val_samples, s.range_bound, lengths, seeds.val, exec);

    let mut params = ModelParams::init(&config.model, seeds.init)?;
    let mut adam = AdamState::new(params.named().into_iter().map(|(_, t)| t));
    adam.beta1 = o.beta1;
    adam.beta2 = o.beta2;
    adam.eps = o.eps;

    let first = EpochMetrics {
        epoch: 0,
        train_mse: evaluate(&params, &train_set, exec)?,
        val_mse: evaluate(&params, &val_set, exec)?,
    };
    progress(&first);
    let mut metrics = vec![first];
    let mut best = params.clone();
    let (mut best_epoch, mut best_val) = (0, first.val_mse);
    let mut status = if first.val_mse.is_finite() {
        RunStatus::Completed
    } else {
        RunStatus::Failed {
            reason: "non-finite loss at initialization".into(),
        }
    };

    let steps_per_epoch = s.train_samples.div_ceil(o.batch_size);
    let total_steps = steps_per_epoch * o.epochs;
    let mut step = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.shuffle);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    'epochs: for epoch in 1..=o.epochs {
        if status != RunStatus::Completed {
            break;
        }
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut entries = 0usize;
        for idx in order.chunks(o.batch_size) {
            let batch = train_set.select(idx);
            let outcome = minibatch_step(&params, &batch, exec);
            let (loss, grads) = match outcome {
                Ok(v) => v,
                Err(HarnessError::Model(ModelError::Tensor(TensorError::NumericOverflow { op }))) => {
                    status = RunStatus::Failed {
                        reason: format!("non-finite value in {op} at epoch {epoch}"),
                    };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                status = RunStatus::Failed {
                    reason: format!("non-finite loss at epoch {epoch}"),
                };
                break 'epochs;
            }
            let lr = o.lr_at(step, total_steps);
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            adam_step(&mut params.tensors_mut(), &grad_refs, &mut adam, lr)?;
            step += 1;
            let n: usize = batch.targets.iter().map(Vec::len).sum();
            sum += loss * n as f64;
            entries += n;
        }
        let val_mse = evaluate(&params, &val_set, exec)?;
        let m = EpochMetrics {
            epoch,
            train_mse: sum / entries as f64,
            val_mse,
        };
        progress(&m);
        metrics.push(m);
        if !val_mse.is_finite() {
            status = RunStatus::Failed {
                reason: format!("non-finite validation loss at epoch {epoch}"),
            };
            break;
        }
        if val_mse < best_val {
            best_val = val_mse;
            best_epoch = epoch;
            best = params.clone();
        }
    }

    let manifest = RunManifest {
        schema: MANIFEST_SCHEMA.into(),
        code_version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).into(),
        config: config.clone(),
        status,
        metrics,
        best_epoch,
        best_val_mse: best_val,
        ood: Vec::new(),
        checkpoint: None,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(TrainedRun { manifest, best })
}
