use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::Vocabulary;

/// JSON sidecar written next to every model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub kind: String,
    pub vocab_sha256: String,
    pub vocab: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
}

impl ModelManifest {
    pub fn new(kind: &str, vocab: &Vocabulary, config: serde_json::Value, seed: u64) -> Self {
        Self { kind: kind.to_string(), vocab_sha256: vocab.fingerprint(), vocab: vocab.tokens().to_vec(), config, seed }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let v = Vocabulary::try_from(self.vocab.clone()).map_err(Error::Checkpoint)?;
        if v.fingerprint() != self.vocab_sha256 {
            return Err(Error::Checkpoint(format!("{} manifest: vocabulary hash mismatch", self.kind)));
        }
        Ok(v)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, kind: &str) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&s).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if m.kind != kind {
            return Err(Error::Checkpoint(format!("{}: expected a {kind} manifest, found {}", path.display(), m.kind)));
        }
        Ok(m)
    }
}
