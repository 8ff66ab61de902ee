use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::sim::Task;

use super::{ModelConfig, ModelError, Normalizer};

pub const DESCRIPTOR_SCHEMA: u32 = 1;

/// Everything besides parameter values needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescriptor {
    pub schema_version: u32,
    pub task: Task,
    pub layout: Vec<String>,
    pub model: ModelConfig,
    pub normalizer: Normalizer,
}

impl ModelDescriptor {
    pub fn new(task: Task, layout: Vec<String>, model: ModelConfig, normalizer: Normalizer) -> Self {
        Self {
            schema_version: DESCRIPTOR_SCHEMA,
            task,
            layout,
            model,
            normalizer,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("descriptor serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let d: Self = toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        if d.schema_version != DESCRIPTOR_SCHEMA {
            return Err(ModelError::Config(format!(
                "descriptor schema {} is not supported (expected {DESCRIPTOR_SCHEMA})",
                d.schema_version
            )));
        }
        d.model.validate().map_err(ModelError::Config)?;
        if d.normalizer.vars() != d.model.state_dim || d.layout.len() != d.model.state_dim {
            return Err(ModelError::Config("layout, normalizer and state_dim disagree".into()));
        }
        Ok(d)
    }

    /// Hex digest identifying the model layout and preprocessing.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest[..12].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_toml())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}
