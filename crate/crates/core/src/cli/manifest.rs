//! Run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::io_util::sha256_file;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    /// Input path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub artifacts: Vec<PathBuf>,
    pub wall_time_s: f64,
    pub code_version: String,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            config: Value::Null,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
            wall_time_s: 0.0,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let hash = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    pub fn add_artifact(&mut self, path: &Path) {
        if !self.artifacts.iter().any(|p| p == path) {
            self.artifacts.push(path.to_path_buf());
        }
    }

    /// Records every file under `dir`, sorted.
    pub fn collect_artifacts(&mut self, dir: &Path) -> Result<()> {
        let mut stack = vec![dir.to_path_buf()];
        let mut found = Vec::new();
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d)? {
                let p = e?.path();
                if p.is_dir() {
                    stack.push(p);
                } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                    found.push(p);
                }
            }
        }
        found.sort();
        for p in found {
            self.add_artifact(&p);
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::analysis::write_report(path, self)
    }
}
