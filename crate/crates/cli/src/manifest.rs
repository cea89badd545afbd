//! Reproducibility manifests written next to every run's outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub version: u32,
    pub command: &'static str,
    pub seed: u64,
    /// SHA-256 of the command's configuration.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub versions: BTreeMap<&'static str, &'static str>,
    /// SHA-256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every file written.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn hash_config(config: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

impl RunManifest {
    pub fn new(command: &'static str, seed: u64, config: impl Serialize) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let versions = [
            ("cen-cli", env!("CARGO_PKG_VERSION")),
            ("cen-core", cen_core::VERSION),
        ]
        .into_iter()
        .collect();
        Ok(Self {
            version: cen_core::annotation::FORMAT_VERSION,
            command,
            seed,
            config_hash: hash_config(&config),
            config,
            versions,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(display(path), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(display(path), sha256_file(path)?);
        Ok(())
    }

    /// Writes `<dir>/<command>.manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}.manifest.json", self.command));
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// File name only, so manifests do not depend on where a run happened.
fn display(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}
