//! Run-directory bookkeeping: a manifest tying outputs to the exact
//! configuration, seed, and input digests that produced them, plus a
//! guard that removes partial outputs when a command fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config_digest: String,
    /// Input label -> content digest.
    pub inputs: BTreeMap<String, String>,
    /// File names written into the run directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config_digest: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            config_digest: config_digest.to_string(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, label: &str, path: &Path) -> Result<()> {
        let digest = ragline::digest::sha256_file(path)
            .with_context(|| format!("digesting input {}", path.display()))?;
        self.inputs.insert(label.to_string(), digest);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(&path, json)?;
        Ok(path)
    }
}

/// Tracks files created by one command; unless disarmed, dropping the
/// guard deletes them so a failed run leaves no partial outputs behind.
pub struct OutputGuard {
    paths: Vec<PathBuf>,
    armed: bool,
}

impl OutputGuard {
    pub fn new() -> Self {
        OutputGuard {
            paths: Vec::new(),
            armed: true,
        }
    }

    pub fn track(&mut self, path: &Path) {
        self.paths.push(path.to_path_buf());
    }

    pub fn disarm(mut self) {
        self.armed = false;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.armed {
            for p in &self.paths {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

/// Create the run directory if needed; refuse a path that exists but is
/// not a directory.
pub fn ensure_run_dir(dir: &Path) -> Result<()> {
    if dir.exists() && !dir.is_dir() {
        anyhow::bail!("{} exists and is not a directory", dir.display());
    }
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating run directory {}", dir.display()))?;
    Ok(())
}
