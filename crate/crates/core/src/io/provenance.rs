//! Sidecar files recording how an artifact was produced.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub artifact: String,
    /// SHA-256 of the compact JSON encoding of the configuration.
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
}

pub fn config_hash(config: &serde_json::Value) -> String {
    let digest = Sha256::digest(config.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// `<artifact>.meta.json` next to the artifact.
pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

pub fn write_sidecar(artifact: &Path, config: &serde_json::Value, seed: u64) -> Result<PathBuf> {
    let meta = Provenance {
        artifact: artifact.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        config_hash: config_hash(config),
        seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let path = sidecar_path(artifact);
    fs::write(&path, serde_json::to_vec_pretty(&meta)?)?;
    Ok(path)
}

pub fn read_sidecar(artifact: &Path) -> Result<Provenance> {
    Ok(serde_json::from_slice(&fs::read(sidecar_path(artifact))?)?)
}
