use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::config_hash;
use crate::error::{Error, Result};

/// Provenance written next to every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub inputs: BTreeMap<String, String>,
    pub choices: BTreeMap<String, String>,
}

impl RunMeta {
    pub fn new<S: Serialize>(command: &str, params: &S, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config_hash(&(command, params)),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: BTreeMap::new(),
            choices: BTreeMap::new(),
        }
    }

    pub fn input(mut self, key: &str, path: &Path) -> Self {
        self.inputs.insert(key.to_string(), path.display().to_string());
        self
    }

    pub fn choice(mut self, key: &str, value: impl Into<String>) -> Self {
        self.choices.insert(key.to_string(), value.into());
        self
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path.display().to_string(), e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `report.json` → `report.meta.json`; a directory gets `meta.json` inside.
pub fn meta_path(artifact: &Path) -> std::path::PathBuf {
    if artifact.is_dir() {
        artifact.join("meta.json")
    } else {
        let stem = artifact.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        artifact.with_file_name(format!("{stem}.meta.json"))
    }
}
