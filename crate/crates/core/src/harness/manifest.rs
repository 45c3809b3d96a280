use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::config::ExperimentConfig;

pub const MANIFEST_NAME: &str = "manifest.json";

/// Noise streams are keyed by `(master seed, path index)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub master: u64,
    pub path_indices: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub config_hash: String,
    pub code_version: String,
    pub started: DateTime<Utc>,
    pub finished: Option<DateTime<Utc>>,
    pub threads: usize,
    pub seeds: SeedRecord,
    /// Paths relative to the output directory.
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn start(cfg: &ExperimentConfig, threads: usize) -> Self {
        Self {
            experiment: cfg.experiment.name().to_string(),
            config_hash: cfg.hash(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started: Utc::now(),
            finished: None,
            threads,
            seeds: SeedRecord { master: cfg.ensemble.seed, path_indices: (0..cfg.ensemble.paths as u64).collect() },
            files: Vec::new(),
        }
    }

    pub fn add_file(&mut self, name: impl Into<String>) {
        let name = name.into();
        if !self.files.contains(&name) {
            self.files.push(name);
        }
    }

    /// Write `manifest.json` (listing itself) into `dir`.
    pub fn finish(&mut self, dir: &Path) -> Result<PathBuf> {
        self.finished = Some(Utc::now());
        self.add_file(MANIFEST_NAME);
        let path = dir.join(MANIFEST_NAME);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_NAME))?)?)
    }
}
