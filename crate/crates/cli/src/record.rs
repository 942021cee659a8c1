use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mmlnet::error::Result;
use mmlnet::{Error, ExperimentConfig};

pub const RECORD_FILE: &str = "run.json";

/// Provenance stamp written into every output directory.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    /// Full command line; re-running it in the same working directory repeats the run.
    pub command: String,
    pub timestamp: String,
    pub outputs: Vec<PathBuf>,
    /// Effective config after file, seed and overrides were applied.
    pub config: ExperimentConfig,
    pub working_dir: PathBuf,
}

impl RunRecord {
    pub fn new(config: &ExperimentConfig, argv: &[String], outputs: Vec<PathBuf>) -> Self {
        Self {
            config_hash: config.hash(),
            command: argv.iter().map(|a| quote(a)).collect::<Vec<_>>().join(" "),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            outputs,
            config: config.clone(),
            working_dir: std::env::current_dir().unwrap_or_default(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RECORD_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Invariant(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::Io { path, source: e })
    }
}

fn quote(arg: &str) -> String {
    if !arg.is_empty() && arg.chars().all(|c| c.is_ascii_alphanumeric() || "-_./=,:+".contains(c)) {
        arg.to_string()
    } else {
        format!("'{}'", arg.replace('\'', r"'\''"))
    }
}
