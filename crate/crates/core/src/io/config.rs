//! Run configuration as TOML.
//!
//! Every section except `dataset` is optional and falls back to the defaults
//! of its struct. Unknown keys are rejected everywhere.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{CfmError, Result};
use crate::guidance::GuidanceConfig;
use crate::losses::LossConfig;
use crate::predictor::{Activation, InputNorm, OutputKind, PredictorConfig};
use crate::sampler::SampleConfig;
use crate::trainer::TrainConfig;

/// Network shape; positions and categories come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub width: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub weight_net_dim: usize,
    pub activation: Activation,
    pub input_norm: InputNorm,
    pub output: OutputKind,
}

impl Default for ModelSection {
    fn default() -> Self {
        let p = PredictorConfig::default();
        ModelSection {
            width: p.width,
            depth: p.depth,
            embed_dim: p.embed_dim,
            weight_net_dim: p.weight_net_dim,
            activation: p.activation,
            input_norm: p.input_norm,
            output: p.output,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `x_t = (1 - t) x0 + t x1`.
    #[default]
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sample: SampleConfig,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    pub dataset: DatasetSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CfmError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CfmError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The fully resolved configuration, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CfmError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        self.guidance.validate()?;
        self.predictor_config()?.validate()
    }

    pub fn predictor_config(&self) -> Result<PredictorConfig> {
        let (positions, categories) = match self.dataset {
            DatasetSpec::Parity { positions, categories } => (positions, categories),
            DatasetSpec::Bars { grid } => (grid * grid, 2),
        };
        let m = &self.model;
        Ok(PredictorConfig {
            positions,
            categories,
            width: m.width,
            depth: m.depth,
            embed_dim: m.embed_dim,
            weight_net_dim: m.weight_net_dim,
            activation: m.activation,
            input_norm: m.input_norm,
            output: m.output,
        })
    }
}
