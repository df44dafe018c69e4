use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dist_core::{sha256_file, Error, Result};
use serde::Serialize;

pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Debug, Serialize)]
pub struct RunProvenance {
    pub subcommand: &'static str,
    pub tool_version: &'static str,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<&'static str, u64>,
    /// File name (relative to the output directory) to sha256.
    pub artifacts: BTreeMap<String, String>,
}

impl RunProvenance {
    pub fn new(subcommand: &'static str, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            subcommand,
            tool_version: env!("CARGO_PKG_VERSION"),
            config: serde_json::to_value(config)?,
            seeds: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        })
    }

    pub fn seed(mut self, name: &'static str, value: u64) -> Self {
        self.seeds.insert(name, value);
        self
    }

    pub fn artifact(&mut self, dir: &Path, path: &Path) -> Result<String> {
        let hash = sha256_file(path)?;
        let name = path.strip_prefix(dir).unwrap_or(path).to_string_lossy().into_owned();
        self.artifacts.insert(name, hash.clone());
        Ok(hash)
    }

    /// Writes `provenance.json` into `dir`, replacing any earlier one.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(PROVENANCE_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Directory that receives the provenance file for an output file path.
pub fn output_dir(out: &Path) -> PathBuf {
    match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}
