//! TOML run configuration, layered under command-line flags.

use std::path::Path;

use anyhow::{Context, Result};
use posattn::harness::{OptimizerConfig, SamplerConfig, TrainConfig};
use posattn::model::{AttentionKind, ModelConfig};
use posattn::tasks::TaskKind;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub task: Option<TaskKind>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub model: ModelOverrides,
    pub sampler: Option<SamplerConfig>,
    pub optimizer: Option<OptimizerConfig>,
}

/// Any subset of [`ModelConfig`] fields.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub max_len: Option<usize>,
    pub num_layers: Option<usize>,
    pub heads: Option<usize>,
    pub d_x: Option<usize>,
    pub d_v: Option<usize>,
    pub d_o: Option<usize>,
    pub mlp_hidden: Option<usize>,
    pub attention: Option<AttentionKind>,
    pub d_p: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Flag values that take precedence over the file.
#[derive(Debug, Default)]
pub struct FlagOverrides {
    pub task: Option<TaskKind>,
    pub attention: Option<AttentionKind>,
    pub n: Option<usize>,
    pub layers: Option<usize>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub train_samples: Option<usize>,
    pub val_samples: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub variable_length: bool,
}

pub fn resolve(file: &FileConfig, flags: &FlagOverrides) -> Result<TrainConfig> {
    let m = &file.model;
    let task = flags.task.or(file.task).context("no task given (--task or `task` in the config)")?;
    let attention = flags
        .attention
        .or(m.attention)
        .context("no attention kind given (--attn or `model.attention`)")?;
    let n = flags.n.or(m.max_len).context("no length given (--n or `model.max_len`)")?;

    let mut model = ModelConfig::new(n, attention);
    model.num_layers = flags.layers.or(m.num_layers).unwrap_or(model.num_layers);
    model.heads = m.heads.unwrap_or(model.heads);
    model.d_x = m.d_x.unwrap_or(model.d_x);
    model.d_v = m.d_v.unwrap_or(model.d_v);
    model.d_o = m.d_o.unwrap_or(model.d_o);
    model.mlp_hidden = m.mlp_hidden.unwrap_or(model.mlp_hidden);
    model.d_p = m.d_p.unwrap_or(model.d_p);

    let seed = flags.seed.or(file.seed).unwrap_or(0);
    let mut config = TrainConfig::new(task, model, seed);
    if let Some(s) = &file.sampler {
        config.sampler = s.clone();
    }
    if let Some(o) = &file.optimizer {
        config.optimizer = o.clone();
    }
    let (s, o) = (&mut config.sampler, &mut config.optimizer);
    s.train_samples = flags.train_samples.unwrap_or(s.train_samples);
    s.val_samples = flags.val_samples.unwrap_or(s.val_samples);
    s.variable_length |= flags.variable_length;
    o.epochs = flags.epochs.unwrap_or(o.epochs);
    o.batch_size = flags.batch_size.unwrap_or(o.batch_size);
    if let Some(lr) = flags.lr {
        o.lr = lr;
        o.lr_min = o.lr_min.min(lr);
    }
    config.validate()?;
    Ok(config)
}
