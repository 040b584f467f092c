//! Run configuration, as read from a JSON file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{BlipConfig, Strategy};
use crate::error::{Error, Result};
use crate::nn::{Activation, OptimConfig};
use crate::quant::QuantConfig;
use crate::tasks::StreamConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden_dims")]
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

fn default_hidden_dims() -> Vec<usize> {
    vec![1200, 1200]
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dims: default_hidden_dims(),
            activation: Activation::Relu,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub stream: StreamConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub quant: QuantConfig,
    #[serde(default)]
    pub blip: BlipConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl RunConfig {
    /// Config with defaults everywhere except the stream.
    pub fn new(stream: StreamConfig) -> Self {
        RunConfig {
            stream,
            model: ModelConfig::default(),
            strategy: Strategy::default(),
            quant: QuantConfig::default(),
            blip: BlipConfig::default(),
            optim: OptimConfig::default(),
            seeds: default_seeds(),
            out_dir: default_out_dir(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads and validates a config file; relative data paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: RunConfig = serde_json::from_str(&text).map_err(|e| Error::config("config", e.to_string()))?;
        if let Some(base) = path.parent() {
            config.stream.resolve_relative(base);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        if self.model.hidden_dims.is_empty() {
            return Err(Error::config("model.hidden_dims", "at least one hidden layer required"));
        }
        if self.model.hidden_dims.contains(&0) {
            return Err(Error::config("model.hidden_dims", "widths must be positive"));
        }
        self.quant.validate()?;
        self.blip.validate()?;
        self.optim.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed required"));
        }
        Ok(())
    }
}
