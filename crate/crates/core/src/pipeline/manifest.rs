use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub finished_unix: u64,
    /// Paths relative to the run root.
    pub artifacts: Vec<String>,
}

/// Ledger of completed phases for one run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub phases: BTreeMap<String, PhaseRecord>,
}

impl RunManifest {
    pub fn new(config_hash: &str) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            phases: BTreeMap::new(),
        }
    }

    /// Reads the manifest at `path`. A missing file, or one written for a
    /// different configuration, yields a fresh manifest.
    pub fn open(path: &Path, config_hash: &str) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::new(config_hash));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if m.config_hash != config_hash {
            log::info!("configuration changed since the last run; earlier phases are stale");
            return Ok(Self::new(config_hash));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// True when `phase` finished under this configuration and every artifact
    /// it listed is still on disk.
    pub fn is_complete(&self, phase: &str, root: &Path) -> bool {
        self.phases.get(phase).is_some_and(|r| r.artifacts.iter().all(|a| root.join(a).exists()))
    }

    pub fn record(&mut self, phase: &str, artifacts: Vec<String>) {
        let finished_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        self.phases.insert(phase.to_string(), PhaseRecord { finished_unix, artifacts });
    }
}
