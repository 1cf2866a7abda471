//! Run configuration: training settings, benchmark spec, output directory and
//! report toggles in one strict JSON document.

use std::fs;
use std::path::{Path, PathBuf};

use gdcan_core::data::DomainPairSpec;
use gdcan_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Reports {
    pub routing_csv: bool,
    pub attention_csv: bool,
    /// Per-step loss records, one JSON object per line.
    pub steps_jsonl: bool,
}

impl Default for Reports {
    fn default() -> Self {
        Reports {
            routing_csv: true,
            attention_csv: true,
            steps_jsonl: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DomainPairSpec,
    pub out_dir: Option<PathBuf>,
    pub reports: Reports,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        Self::from_json(&text).map_err(|detail| ConfigError::Parse {
            path: path.to_owned(),
            detail,
        })
    }

    pub fn validate(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        self.data.validate().map_err(|e| e.to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
