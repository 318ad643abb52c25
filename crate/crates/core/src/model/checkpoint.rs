use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelParams, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_SCHEMA: &str = "posattn.checkpoint.v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    /// Row-major values.
    pub data: Vec<f64>,
}

/// Named tensors plus free-form metadata, serialized as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn new<'a>(config: serde_json::Value, tensors: impl IntoIterator<Item = (String, &'a Tensor)>) -> Self {
        let tensors = tensors
            .into_iter()
            .map(|(name, t)| {
                (
                    name,
                    TensorRecord {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            schema: CHECKPOINT_SCHEMA.into(),
            config,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let rec = self
            .tensors
            .get(name)
            .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor '{name}'")))?;
        Ok(Tensor::new(rec.shape.clone(), rec.data.clone())?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.schema != CHECKPOINT_SCHEMA {
            return Err(ModelError::Checkpoint(format!(
                "unsupported schema '{}', expected '{CHECKPOINT_SCHEMA}'",
                ck.schema
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

impl ModelParams {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        Checkpoint::new(config, self.named())
    }

    /// Rebuilds parameters, checking every tensor against the stored config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(ck.config.clone())?;
        let mut params = ModelParams::init(&config, 0)?;
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        if ck.tensors.len() != names.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                names.len(),
                ck.tensors.len()
            )));
        }
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = ck.tensor(name)?;
            if t.shape() != slot.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "'{name}' has shape {:?}, config implies {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionKind;

    #[test]
    fn round_trip_is_bitwise() {
        let mut c = ModelConfig::new(4, AttentionKind::SelfRope);
        c.d_x = 6;
        let params = ModelParams::init(&c, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        params.save(&path).unwrap();
        let back = ModelParams::load(&path).unwrap();
        assert_eq!(back, params);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"layer.2.head.1.W_Q\""));
        assert!(text.starts_with("{\"schema\":\"posattn.checkpoint.v1\""));
    }

    #[test]
    fn rejects_bad_schema_and_shapes() {
        let c = ModelConfig::new(2, AttentionKind::Positional);
        let mut ck = ModelParams::init(&c, 0).unwrap().to_checkpoint();
        ck.tensors.get_mut("decoder").unwrap().shape = vec![1, 64];
        assert!(ModelParams::from_checkpoint(&ck).is_err());
        let mut ck = ModelParams::init(&c, 0).unwrap().to_checkpoint();
        ck.schema = "other".into();
        assert!(Checkpoint::from_json(&ck.to_json().unwrap()).is_err());
    }
}
