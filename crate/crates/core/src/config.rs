//! Run configuration file (TOML with `[model]`, `[train]` and `[cutmix]`
//! tables).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::CutMixConfig;
use crate::descriptors::DescriptorKind;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cutmix: CutMixConfig,
}

impl Config {
    /// Twelve blocks, batch 256, 300 epochs.
    pub fn full_scale() -> Self {
        Config::default()
    }

    /// Two blocks, batch 64, 30 epochs.
    pub fn desk_scale() -> Self {
        Config {
            model: ModelConfig::desk_scale(),
            train: TrainConfig::desk_scale(),
            cutmix: CutMixConfig::default(),
        }
    }

    pub fn for_kind(mut self, kind: DescriptorKind) -> Self {
        self.model = self.model.for_kind(kind);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.cutmix.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::open(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
