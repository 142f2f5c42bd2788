//! Run configuration file.

use std::path::{Path, PathBuf};

use msasr::search::{DEFAULT_CTC_WEIGHT, DEFAULT_LM_WEIGHT};
use msasr::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

fn default_lambda_decode() -> f64 {
    DEFAULT_CTC_WEIGHT
}

fn default_gamma() -> f64 {
    DEFAULT_LM_WEIGHT
}

fn default_beam() -> usize {
    4
}

/// Data locations; command-line flags take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub train_manifest: Option<PathBuf>,
    pub dev_manifest: Option<PathBuf>,
    /// Defaults to `vocab.txt` next to the training manifest.
    pub vocab: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// CTC weight λ used when decoding.
    #[serde(default = "default_lambda_decode")]
    pub lambda_decode: f64,
    /// Language-model weight γ.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_beam")]
    pub beam: usize,
    #[serde(default)]
    pub paths: Paths,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.train.validate().map_err(|e| CliError::Usage(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }
}
