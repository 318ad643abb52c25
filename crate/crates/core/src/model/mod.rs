//! Positional and standard Transformer layers with linear encoder/decoder.
//!
//! Each layer computes `Φ((⊕_h A_h X W_V^h) W_O ⊕ X)` where `⊕` is column
//! concatenation. Positional attention derives `A_h` from the fixed one-hot
//! encodings `P` only; standard attention derives it from the layer input.

mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{Checkpoint, TensorRecord, CHECKPOINT_SCHEMA};
pub(crate) use checkpoint::write_atomic;
pub use forward::{
    attention_output, layer_forward, mlp, model_forward, positional_attention, positional_attention_on, self_attention,
    Forward,
};
pub use params::{HeadParams, HeadVars, LayerParams, LayerVars, ModelParams, ParamVars};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input length {m} exceeds the model's maximum length {n}")]
    TooLong { m: usize, n: usize },
    #[error("empty input")]
    Empty,
    #[error("all sequences in a batch must share one length")]
    Ragged,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Attention from the fixed positional encodings only.
    Positional,
    /// Attention from the layer input; one-hot positions concatenated at the encoder.
    #[serde(rename = "self")]
    SelfAttention,
    /// Attention from the layer input with rotary position embedding.
    SelfRope,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Positional => "positional",
            AttentionKind::SelfAttention => "self",
            AttentionKind::SelfRope => "self_rope",
        }
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positional" => Ok(AttentionKind::Positional),
            "self" | "standard" => Ok(AttentionKind::SelfAttention),
            "self_rope" | "rope" => Ok(AttentionKind::SelfRope),
            _ => Err(ModelError::Config(format!("unknown attention kind '{s}'"))),
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Maximum number of input values `n`; sequences carry one extra scratchpad row.
    pub max_len: usize,
    pub num_layers: usize,
    pub heads: usize,
    pub d_x: usize,
    pub d_v: usize,
    pub d_o: usize,
    pub mlp_hidden: usize,
    pub attention: AttentionKind,
    /// Width of the one-hot positional encodings, equal to `max_len + 1`.
    pub d_p: usize,
}

/// `⌈log₂ n⌉ + 1`.
pub fn default_layers(n: usize) -> usize {
    let mut l = 0;
    while (1usize << l) < n {
        l += 1;
    }
    l + 1
}

impl ModelConfig {
    pub fn new(max_len: usize, attention: AttentionKind) -> Self {
        ModelConfig {
            max_len,
            num_layers: default_layers(max_len),
            heads: 2,
            d_x: 64,
            d_v: 32,
            d_o: 64,
            mlp_hidden: 64,
            attention,
            d_p: max_len + 1,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.max_len + 1
    }

    /// Inner width of queries and keys.
    pub fn d_m(&self) -> usize {
        match self.attention {
            AttentionKind::Positional => self.d_p,
            _ => self.d_x,
        }
    }

    /// Rows of `W_Q` / `W_K`.
    pub fn qk_in(&self) -> usize {
        match self.attention {
            AttentionKind::Positional => self.d_p,
            _ => self.d_x,
        }
    }

    /// Encoder input width: the value, plus one-hot position for standard attention.
    pub fn d_in(&self) -> usize {
        match self.attention {
            AttentionKind::SelfAttention => 1 + self.d_p,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.max_len,
            self.num_layers,
            self.heads,
            self.d_x,
            self.d_v,
            self.d_o,
            self.mlp_hidden,
            self.d_p,
        ];
        if dims.contains(&0) {
            return Err(ModelError::Config(format!("all dimensions must be positive: {self:?}")));
        }
        if self.d_p != self.seq_len() {
            return Err(ModelError::Config(format!(
                "one-hot positional encodings need d_p = n + 1 = {}, got {}",
                self.seq_len(),
                self.d_p
            )));
        }
        if self.attention == AttentionKind::SelfRope && !self.d_m().is_multiple_of(2) {
            return Err(ModelError::Config("rotary embedding needs an even query width".into()));
        }
        Ok(())
    }

    /// Number of learnable scalars; `P` is fixed and not counted.
    pub fn param_count(&self) -> usize {
        let head = 2 * self.qk_in() * self.d_m() + self.d_x * self.d_v;
        let layer = self.heads * head
            + self.heads * self.d_v * self.d_o
            + (self.d_o + self.d_x) * self.mlp_hidden
            + self.mlp_hidden
            + self.mlp_hidden * self.d_x
            + self.d_x;
        self.d_in() * self.d_x + self.num_layers * layer + self.d_x
    }
}
