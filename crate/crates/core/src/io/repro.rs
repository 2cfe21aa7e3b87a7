//! Reproducibility records written next to every run's outputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::atomic_write;
use crate::error::{Error, Result};

/// Hex sha256 of `blob <len>\0<bytes>`, the git object-hash layout.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(content_hash(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproRecord {
    pub tool_version: String,
    /// Subcommand and arguments as invoked.
    pub command: Vec<String>,
    /// Fully resolved configuration of the run.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Input path to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output path to content hash.
    pub outputs: BTreeMap<String, String>,
}

impl ReproRecord {
    pub fn new(command: Vec<String>, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command,
            config: serde_json::to_value(config).map_err(|e| Error::Format(e.to_string()))?,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn seed(&mut self, name: &str, value: u64) -> &mut Self {
        self.seeds.insert(name.into(), value);
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        self.inputs.insert(path.display().to_string(), hash_file(path)?);
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> Result<&mut Self> {
        self.outputs.insert(path.display().to_string(), hash_file(path)?);
        Ok(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        atomic_write(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}
