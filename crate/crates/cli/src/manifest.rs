//! Run manifests: every command records its resolved configuration, the
//! content digests of its inputs and outputs, the seed, and the wall-clock
//! duration, so any output can be traced back to the exact invocation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use mnemcap_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub seed: Option<u64>,
    pub toolkit_version: String,
    pub duration_ms: u128,
}

pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: impl Serialize) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.seed = Some(seed);
        self
    }

    /// Digest all recorded files and write the manifest JSON.
    pub fn write(&self, manifest_path: &Path) -> Result<()> {
        let digest_all = |paths: &[PathBuf]| -> Result<Vec<FileDigest>> {
            paths
                .iter()
                .map(|p| {
                    Ok(FileDigest {
                        path: p.display().to_string(),
                        sha256: sha256_file(p)?,
                    })
                })
                .collect()
        };
        let manifest = RunManifest {
            command: self.command.clone(),
            config: self.config.clone(),
            inputs: digest_all(&self.inputs)?,
            outputs: digest_all(&self.outputs)?,
            seed: self.seed,
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            duration_ms: self.started.elapsed().as_millis(),
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(manifest_path, json)?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Conventional manifest location for a primary output file.
pub fn manifest_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}
