//! Run manifests: enough to re-execute a command and get the same bytes back.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::io;
use crate::Command;

pub const ARTIFACT_VERSION: &str = concat!("polcomp ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Fully resolved command; `replay` runs exactly this.
    pub command: Command,
    /// Command line as typed.
    pub invocation: Vec<String>,
    /// Effective settings after defaults were applied.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub working_dir: PathBuf,
    pub artifact_version: String,
    pub timestamp: String,
}

/// `out.csv` → `out.csv.manifest.json`.
pub fn manifest_path(primary_output: &Path) -> PathBuf {
    let mut name = primary_output.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

/// RFC 3339 time of the run. `SOURCE_DATE_EPOCH` pins it for reproducible builds.
pub fn timestamp() -> Result<String> {
    let now = match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(s) => {
            let secs: i64 = s
                .trim()
                .parse()
                .with_context(|| format!("SOURCE_DATE_EPOCH is not an integer: '{s}'"))?;
            chrono::DateTime::from_timestamp(secs, 0)
                .with_context(|| format!("SOURCE_DATE_EPOCH out of range: {secs}"))?
        }
        Err(_) => chrono::Utc::now(),
    };
    Ok(now.to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &io::to_json_bytes(self)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        io::read_json(path)
    }
}
