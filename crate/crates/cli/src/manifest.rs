//! Run manifests: config snapshot plus content hashes of inputs and outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Serialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: &'static str,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    pub notes: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION"),
            seed: config.seed,
            config: config.clone(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            notes: BTreeMap::new(),
        }
    }

    /// Records an input file; an unreadable input is a data error.
    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let hash = sha256_file(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    /// Records an artifact by its file name (artifacts live next to the manifest).
    pub fn artifact(&mut self, path: &Path) -> CliResult<()> {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.artifacts.insert(name, sha256_file(path)?);
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.notes.insert(key.into(), value.to_string());
    }

    /// Writes `manifest-<command>[-<tag>].json` into `dir`.
    pub fn write(&self, dir: &Path, tag: Option<&str>) -> CliResult<PathBuf> {
        let name = match tag {
            Some(t) => format!("manifest-{}-{t}.json", self.command),
            None => format!("manifest-{}.json", self.command),
        };
        let path = dir.join(name);
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(&path, json + "\n")?;
        Ok(path)
    }
}
