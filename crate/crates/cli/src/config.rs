use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rain::eval::STANDARD_HORIZONS;
use rain::model::{GraphVariant, ModelConfig};
use rain::sim::{DatasetSpec, GraphKind, SimConfig, Task};
use rain::train::{Precision, TrainConfig};

use crate::CliError;

pub const EXPERIMENT_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n_train: usize,
    pub n_val: usize,
    pub n_agents: usize,
    pub edge_prob: f64,
    pub seed: u64,
    /// `random` or `weak_link`.
    pub preset: String,
    pub sim: Option<SimConfig>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val: 500,
            n_agents: 5,
            edge_prob: 0.5,
            seed: 1,
            preset: "random".into(),
            sim: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub true_graph: bool,
    pub horizons: Vec<usize>,
    /// Per-sample heatmaps written by `eval`.
    pub heatmaps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            true_graph: false,
            horizons: STANDARD_HORIZONS.to_vec(),
            heatmaps: 8,
        }
    }
}

/// Declarative description of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub task: Task,
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: EXPERIMENT_SCHEMA,
            task: Task::Spring,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reduced widths and epochs for a single-machine run.
    pub fn desk(task: Task) -> Self {
        let state_dim = match task {
            Task::Kuramoto => 3,
            _ => 4,
        };
        Self {
            task,
            train: TrainConfig {
                batch_size: 16,
                epochs: 20,
                learning_rate: 1e-3,
                precision: Precision::F32,
                model: ModelConfig {
                    state_dim,
                    hidden_dim: 128,
                    embed_dim: 64,
                    gru_input: 64,
                    decoder_hidden: 128,
                    ..ModelConfig::default()
                },
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let c: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != EXPERIMENT_SCHEMA {
            return Err(CliError::Config(format!(
                "experiment schema {} is not supported (expected {EXPERIMENT_SCHEMA})",
                self.schema_version
            )));
        }
        self.graph_kind()?;
        self.train.validate().map_err(CliError::Config)?;
        if self.dataset.preset == "weak_link" && self.dataset.n_agents != 10 {
            return Err(CliError::Config("the weak_link preset has 10 agents".into()));
        }
        for path in [
            &self.train.train_data,
            &self.train.train_graphs,
            &self.train.val_data,
            &self.train.val_graphs,
            &self.train.init_checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            if !path.exists() {
                return Err(CliError::Config(format!("{} does not exist", path.display())));
            }
        }
        if self.train.model.n_agents != self.dataset.n_agents {
            return Err(CliError::Config(format!(
                "model expects {} agents, dataset has {}",
                self.train.model.n_agents, self.dataset.n_agents
            )));
        }
        Ok(())
    }

    pub fn graph_kind(&self) -> Result<GraphKind, CliError> {
        match self.dataset.preset.as_str() {
            "random" => Ok(GraphKind::Random {
                edge_prob: self.dataset.edge_prob,
                symmetric: true,
            }),
            "weak_link" => Ok(GraphKind::WeakLink),
            other => Err(CliError::Config(format!(
                "unknown graph preset `{other}` (random or weak_link)"
            ))),
        }
    }

    /// Dataset specification for the training (`val = false`) or validation split.
    pub fn dataset_spec(&self, val: bool) -> Result<DatasetSpec, CliError> {
        let d = &self.dataset;
        let mut sim = d.sim.clone().unwrap_or_else(|| SimConfig::for_task(self.task));
        // Splits come from distinct seed streams.
        sim.seed = if val { d.seed.wrapping_add(1_000_003) } else { d.seed };
        Ok(DatasetSpec {
            task: self.task,
            n_samples: if val { d.n_val } else { d.n_train },
            n_agents: d.n_agents,
            graph: self.graph_kind()?,
            sim,
        })
    }
}

pub fn parse_variant(s: &str) -> Result<GraphVariant, CliError> {
    match s {
        "mlp" => Ok(GraphVariant::MlpSigmoid),
        "gatv2" => Ok(GraphVariant::Gatv2),
        other => Err(CliError::Config(format!(
            "unknown graph extractor `{other}` (mlp or gatv2)"
        ))),
    }
}
