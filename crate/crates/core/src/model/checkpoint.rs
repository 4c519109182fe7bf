use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{layout, ModelConfig, ModelError, ModelParams};
use crate::ingest::DatasetKind;
use crate::nncore::Tensor;

pub const CHECKPOINT_FORMAT: &str = "fogdet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One named parameter: shape plus row-major data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON container for trained weights, the config that shapes them, and the
/// seed of the run that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub kind: Option<DatasetKind>,
    pub config: ModelConfig,
    pub params: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, config: &ModelConfig, seed: u64, kind: Option<DatasetKind>) -> Self {
        let params = params
            .named()
            .into_iter()
            .map(|(name, t)| CheckpointEntry { name, shape: t.shape().to_vec(), data: t.data().to_vec() })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed,
            kind,
            config: config.clone(),
            params,
        }
    }

    /// Rebuilds the parameter set, checking every name and shape against the
    /// stored config.
    pub fn to_params(&self) -> Result<ModelParams, ModelError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unknown format `{}`", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {}", self.version)));
        }
        self.config.validate()?;
        let expected = layout(&self.config);
        let named = expected.named();
        if named.len() != self.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                named.len(),
                self.params.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, shape), entry) in named.into_iter().zip(&self.params) {
            if entry.name != name || &entry.shape != shape {
                return Err(ModelError::Checkpoint(format!(
                    "entry `{}` {:?} does not match expected `{name}` {shape:?}",
                    entry.name, entry.shape
                )));
            }
            tensors.push(Tensor::new(entry.shape.clone(), entry.data.clone())?);
        }
        Ok(expected.rebuild(tensors).expect("count checked"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
