//! JSON run configuration. Every section and key is optional; missing values
//! take their defaults and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{Arch, Role};
use crate::data::DEFAULT_SIZE;
use crate::error::{Error, Result};
use crate::eval::FusionConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dir: Option<PathBuf>,
    pub split_seed: u64,
    /// Side length samples are resized to.
    pub size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dir: None,
            split_seed: 0,
            size: DEFAULT_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Arch,
    pub role: Role,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: Arch::Resnet23,
            role: Role::Classifier,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// Training and inference in 32-bit floats; results are bitwise reproducible.
    #[default]
    F32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeSection {
    pub seed: u64,
    /// Worker threads; `None` uses every available core.
    pub threads: Option<usize>,
    pub precision: Precision,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub runtime: RuntimeSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.size == 0 || self.data.size % 16 != 0 {
            return Err(Error::Config(format!("data.size {} must be a positive multiple of 16", self.data.size)));
        }
        if self.runtime.threads == Some(0) {
            return Err(Error::Config("runtime.threads must be positive".into()));
        }
        self.train.validate()?;
        self.fusion.validate()
    }

    /// Weight decay the run will use: the explicit value or the architecture default.
    pub fn lambda(&self) -> f64 {
        self.train.lambda.unwrap_or_else(|| self.model.arch.default_weight_decay())
    }
}
