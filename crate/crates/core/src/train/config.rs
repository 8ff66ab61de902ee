use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;

pub const TRAIN_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (f32 or f64)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Workers per batch; the determinism contract holds for 1.
    pub threads: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
    /// Reparameterized sampling in training rollouts (mean path otherwise).
    pub sample_noise: bool,
    /// Standardize every state variable with training-set statistics.
    pub normalize: bool,
    /// Stop after this many epochs without a better validation NLL; 0 disables.
    pub patience: usize,
    pub train_data: Option<PathBuf>,
    pub train_graphs: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub val_graphs: Option<PathBuf>,
    /// Parameters to start from instead of a fresh initialization.
    pub init_checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema_version: TRAIN_SCHEMA,
            batch_size: 128,
            epochs: 100,
            learning_rate: 5e-4,
            seed: 0,
            precision: Precision::F64,
            threads: 1,
            clip_norm: 5.0,
            sample_noise: true,
            normalize: true,
            patience: 0,
            train_data: None,
            train_graphs: None,
            val_data: None,
            val_graphs: None,
            init_checkpoint: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.schema_version != TRAIN_SCHEMA {
            return Err(format!(
                "train config schema {} is not supported (expected {TRAIN_SCHEMA})",
                self.schema_version
            ));
        }
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.clip_norm >= 0.0) {
            return Err("clip_norm must be non-negative".into());
        }
        self.model.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let c: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        c.validate()?;
        Ok(c)
    }
}
