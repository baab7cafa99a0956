//! Stage manifests and checkpoint sidecars.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::AggregatorSpec;
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};

pub const MANIFEST_FILE: &str = "manifest.json";
const CANDLE_VERSION: &str = "0.11";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub trusworthy: String,
    pub candle_core: String,
    pub rustc_target: String,
}

impl Versions {
    pub fn current() -> Self {
        Self {
            trusworthy: env!("CARGO_PKG_VERSION").to_string(),
            candle_core: CANDLE_VERSION.to_string(),
            rustc_target: format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
        }
    }
}

/// Written next to every stage's artifacts. Holds everything needed to
/// rerun the stage: the full resolved config, its hash and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub fold: Option<String>,
    pub config_hash: String,
    pub seed: u64,
    pub versions: Versions,
    pub wall_time_s: f64,
    pub artifacts: Vec<String>,
    pub config: String,
}

impl StageManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }
}

pub fn elapsed(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

/// Sidecar describing a saved network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub kind: String,
    pub architecture: String,
    pub embedding_dim: usize,
    pub aggregator: Option<AggregatorSpec>,
    pub config_hash: String,
    pub seed: u64,
}

impl CheckpointInfo {
    pub fn sidecar(checkpoint: &Path) -> std::path::PathBuf {
        checkpoint.with_extension("json")
    }

    pub fn write(&self, checkpoint: &Path) -> Result<()> {
        write_json(&Self::sidecar(checkpoint), self)
    }

    /// Reads the sidecar and checks it describes the expected network.
    pub fn check(checkpoint: &Path, kind: &str, architecture: &str) -> Result<Self> {
        if !checkpoint.exists() {
            return Err(Error::data(format!(
                "missing checkpoint {}; run the producing stage first",
                checkpoint.display()
            )));
        }
        let info: Self = read_json(&Self::sidecar(checkpoint))?;
        if info.kind != kind || info.architecture != architecture {
            return Err(Error::config(format!(
                "{} holds a {} `{}`, expected a {kind} `{architecture}`",
                checkpoint.display(),
                info.kind,
                info.architecture
            )));
        }
        Ok(info)
    }
}
