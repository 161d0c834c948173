//! Run manifests: every output directory carries the resolved config, content
//! digests of its inputs and the produced artifact paths, so any report row
//! can be traced back to the run that made it. Timestamps live here and only
//! here.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub input_digests: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seed: u64,
    pub wall_seconds: f64,
    pub created_unix_ms: u128,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config: &impl Serialize, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            config: serde_json::to_value(config).expect("config serializes"),
            input_digests: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed,
            wall_seconds: 0.0,
            created_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.input_digests
            .insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn record_output(&mut self, name: &str, path: &Path) {
        self.outputs
            .insert(name.to_string(), path.display().to_string());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(path, body + "\n")
            .with_context(|| format!("writing manifest {}", path.display()))
    }
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("digesting {}", path.display()))?;
    Ok(sha256_bytes(&bytes))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of a serializable config, recorded in checkpoint manifests.
pub fn config_digest(config: &impl Serialize) -> String {
    sha256_bytes(serde_json::to_string(config).expect("config serializes").as_bytes())
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("run_manifest.json")
}
