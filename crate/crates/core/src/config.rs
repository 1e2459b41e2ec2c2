//! Declarative experiment file: every section optional, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::preprocess::PreprocessConfig;
use crate::train::TrainConfig;

/// Environment variable overriding `training.seed`.
pub const SEED_ENV: &str = "SEG_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory (volume-io layout) used for training or finetuning.
    pub train: Option<PathBuf>,
    /// Dataset directories used for evaluation.
    pub test: Vec<PathBuf>,
    /// Run the preprocessing chain on load, targeting the model input size.
    pub preprocess: bool,
    pub augment: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            test: Vec::new(),
            preprocess: false,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Root under which `runs/<stage>/<timestamp>/` directories are created.
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs") }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub augmentation: AugmentConfig,
    pub preprocess: PreprocessConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Parses and validates; errors carry the TOML line and column.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        self.augmentation.canonical()?;
        if self.preprocess.spacing_mm <= 0.0 || self.preprocess.clahe_tiles == 0 {
            return Err(Error::Config("preprocess spacing and tile count must be positive".into()));
        }
        Ok(())
    }

    /// Applies `SEG_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.training.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Resolved configuration as TOML, suitable for re-running.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
