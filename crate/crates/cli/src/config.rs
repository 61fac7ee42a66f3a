//! Declarative run configuration for `train`.

use std::path::{Path, PathBuf};

use glasstereo::refinement::FusionMode;
use glasstereo::{ModelConfig, Schedule};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Manifest path, relative to the config file unless absolute.
    pub manifest: PathBuf,
    #[serde(default = "default_train_split")]
    pub train_split: String,
    #[serde(default = "default_val_split")]
    pub val_split: String,
    /// Cap on validation samples per evaluation pass.
    #[serde(default)]
    pub max_val_samples: Option<usize>,
}

fn default_train_split() -> String {
    "train".into()
}

fn default_val_split() -> String {
    "val".into()
}

/// Selective overrides applied on top of the model preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub iterations_train: Option<usize>,
    pub iterations_eval: Option<usize>,
    pub fusion_mode: Option<FusionMode>,
    pub hidden: Option<usize>,
    pub loss_gamma: Option<f64>,
    pub max_disparity_clip: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    #[serde(default = "default_preset")]
    pub model_preset: String,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default)]
    pub schedule: Schedule,
}

fn default_preset() -> String {
    "toy".into()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        if cfg.dataset.manifest.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.dataset.manifest = dir.join(&cfg.dataset.manifest);
            }
        }
        Ok(cfg)
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let mut m = ModelConfig::preset(&self.model_preset)?;
        let o = &self.model;
        if let Some(v) = o.iterations_train {
            m.refinement.iterations_train = v;
        }
        if let Some(v) = o.iterations_eval {
            m.refinement.iterations_eval = v;
        }
        if let Some(v) = o.fusion_mode {
            m.refinement.fusion_mode = v;
        }
        if let Some(v) = o.hidden {
            m.refinement.hidden = v;
        }
        if let Some(v) = o.loss_gamma {
            m.loss_gamma = v;
        }
        if let Some(v) = o.max_disparity_clip {
            m.max_disparity_clip = v;
        }
        m.validate()?;
        Ok(m)
    }
}

/// Everything a training run actually used, written before any work.
#[derive(Clone, Debug, Serialize)]
pub struct ResolvedTrainConfig<'a> {
    pub seed: u64,
    pub output_dir: &'a Path,
    pub dataset: &'a DatasetConfig,
    pub model: &'a ModelConfig,
    pub schedule: &'a Schedule,
}
