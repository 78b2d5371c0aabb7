//! TOML run configuration: one file describes task, model, training, and
//! decoding; command line flags override individual fields.

use bilctc_core::data::SyntheticTaskSpec;
use bilctc_core::decode::DecodeConfig;
use bilctc_core::error::{Error, Result};
use bilctc_core::model::ModelSpec;
use bilctc_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataCounts {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
}

impl Default for DataCounts {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_dev: 40,
            n_test: 40,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: SyntheticTaskSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub data: DataCounts,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        if self.model.feature_dim != self.task.feature_dim {
            return Err(Error::Config(format!(
                "model feature_dim {} != task feature_dim {}",
                self.model.feature_dim, self.task.feature_dim
            )));
        }
        if self.model.source_vocab != self.task.source_vocab
            || self.model.target_vocab != self.task.target_vocab
        {
            return Err(Error::Config(
                "model vocabulary sizes must match the task".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}
