use serde::{Deserialize, Serialize};

use super::{evaluate, train, Result, Seeds, TrainConfig};
use crate::model::{default_layers, AttentionKind, ModelParams};
use crate::par::{map_indexed, Execution};
use crate::tasks::{sample_test_ood_with, sample_train_with, LengthMode, TaskKind, TRAIN_BOUND};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    pub scale: f64,
    pub mse: f64,
    pub n_samples: usize,
    pub seed: u64,
}

/// MSE on fresh test batches per scale; scale 1 uses the training sampler.
pub fn ood_sweep(
    params: &ModelParams,
    task: TaskKind,
    lengths: LengthMode,
    scales: &[f64],
    samples: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<OodRow>> {
    let mut rows = Vec::with_capacity(scales.len());
    for (k, &c) in scales.iter().enumerate() {
        let s = Seeds::derive(seed).eval.wrapping_add(k as u64);
        let batch = if c == 1.0 {
            sample_train_with(task, samples, TRAIN_BOUND, lengths, s, exec)
        } else {
            sample_test_ood_with(task, c, samples, lengths, s, exec)?
        };
        rows.push(OodRow {
            scale: c,
            mse: evaluate(params, &batch, exec)?,
            n_samples: samples,
            seed,
        });
    }
    Ok(rows)
}

/// One trained configuration of a sweep grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub task: TaskKind,
    pub attention: AttentionKind,
    pub n: usize,
    pub train_samples: usize,
    pub seed: u64,
    pub scale: f64,
    pub val_mse: f64,
    pub ood_mse: f64,
    pub failed: bool,
}

fn run_grid(configs: Vec<TrainConfig>, scale: f64, test_samples: usize, exec: Execution) -> Result<Vec<SweepRow>> {
    // Grid points run on parallel workers; each run is sequential inside.
    let inner = if exec.is_parallel() { Execution::Sequential } else { exec };
    let rows = map_indexed(exec, configs.len(), |i| -> Result<SweepRow> {
        let c = &configs[i];
        let run = train(c, inner)?;
        let ood = ood_sweep(&run.best, c.task, c.lengths(), &[scale], test_samples, c.seed, inner)?;
        Ok(SweepRow {
            task: c.task,
            attention: c.model.attention,
            n: c.model.max_len,
            train_samples: c.sampler.train_samples,
            seed: c.seed,
            scale,
            val_mse: run.manifest.best_val_mse,
            ood_mse: ood[0].mse,
            failed: run.manifest.failed(),
        })
    });
    rows.into_iter().collect()
}

/// Trains `base` at every training-set size and seed, reporting OOD MSE at `scale`.
pub fn sample_size_sweep(
    base: &TrainConfig,
    sizes: &[usize],
    seeds: &[u64],
    scale: f64,
    test_samples: usize,
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    let mut configs = Vec::new();
    for &size in sizes {
        for &seed in seeds {
            let mut c = base.clone();
            c.sampler.train_samples = size;
            c.seed = seed;
            configs.push(c);
        }
    }
    run_grid(configs, scale, test_samples, exec)
}

/// Trains `base` at every fixed length, with depth `⌈log₂ n⌉ + 1` and widths from `base`.
pub fn length_sweep(
    base: &TrainConfig,
    lengths: &[usize],
    seeds: &[u64],
    scale: f64,
    test_samples: usize,
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    let mut configs = Vec::new();
    for &n in lengths {
        for &seed in seeds {
            let mut c = base.clone();
            c.model.max_len = n;
            c.model.d_p = n + 1;
            c.model.num_layers = default_layers(n);
            c.sampler.variable_length = false;
            c.seed = seed;
            configs.push(c);
        }
    }
    run_grid(configs, scale, test_samples, exec)
}
