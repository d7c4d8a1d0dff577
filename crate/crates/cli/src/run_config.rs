use std::path::Path;

use serde::Deserialize;

use femtodet::net::ModelConfig;
use femtodet::train::schedule::LrSchedule;
use femtodet::train::{TrainConfig, ToyDatasetConfig};

use crate::CliError;

/// Everything `femto train` needs besides the schedule kind and seed.
/// Every table is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: ToyDatasetConfig,
    pub train: TrainConfig,
    pub lr: LrSchedule,
    /// Defaults to the standard detector sized for the dataset.
    pub model: Option<ModelConfig>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        cfg.dataset.validate()?;
        if let Some(m) = &cfg.model {
            m.validate()?;
        }
        Ok(cfg)
    }
}
