//! Run-level configuration: one TOML file with a section per subsystem.
//!
//! Every field has a default, unknown keys are rejected, and the full
//! config — defaults included — can be echoed back out, so a persisted run
//! directory always records exactly what it ran with.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{GenerationConfig, ModelConfig};
use crate::noise::NoiseConfig;
use crate::objective::LossConfig;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Path to a newline-delimited prompt/response dataset. When absent,
    /// commands fall back to the bundled deterministic copy task.
    pub data: Option<String>,
    pub model: ModelConfig,
    pub noise: NoiseConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub generation: GenerationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            data: None,
            model: ModelConfig::default(),
            noise: NoiseConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            generation: GenerationConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse a TOML string and validate every section.
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.noise.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.generation.validate()?;
        if let Some(data) = &self.data {
            if data.trim().is_empty() {
                return Err(Error::Config("data: empty path".into()));
            }
        }
        Ok(())
    }

    /// Full TOML echo with every defaulted field materialized.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config echo: {e}")))
    }
}
