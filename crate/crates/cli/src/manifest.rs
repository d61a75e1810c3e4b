//! Run manifests. `manifest.json` is written once, before any work starts;
//! the end timestamp goes to a separate `manifest.end.json` so the manifest
//! itself is never rewritten.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliResult;

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_END: &str = "manifest.end.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub command: String,
    /// Resolved configuration, one `key = value` line per key.
    pub config: String,
    pub config_sha256: String,
    pub version: String,
    pub started_unix_ms: u128,
    pub inputs: Vec<InputFile>,
    /// Artifact paths relative to the run directory.
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEnd {
    pub finished_unix_ms: u128,
    pub artifacts: Vec<String>,
    pub missing: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// An output directory with its manifest already on disk.
#[derive(Debug)]
pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl Run {
    /// Creates `dir`, snapshots the config and writes the manifest.
    pub fn start(dir: &Path, cfg: &ExperimentConfig, command: &str, inputs: &[&Path], artifacts: &[&str]) -> CliResult<Run> {
        fs::create_dir_all(dir)?;
        let config = cfg.to_toml();
        let inputs = inputs
            .iter()
            .map(|p| Ok(InputFile { path: p.to_string_lossy().into_owned(), sha256: sha256_file(p)? }))
            .collect::<CliResult<Vec<_>>>()?;
        let manifest = RunManifest {
            name: cfg.name.clone(),
            command: command.to_string(),
            config_sha256: sha256_hex(config.as_bytes()),
            config: config.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_ms: now_ms(),
            inputs,
            artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
        };
        let _ = fs::remove_file(dir.join(MANIFEST_END));
        fs::write(dir.join(CONFIG_SNAPSHOT), &config)?;
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(Run { dir: dir.to_path_buf(), manifest })
    }

    pub fn path(&self, artifact: &str) -> PathBuf {
        self.dir.join(artifact)
    }

    /// Records the end time and which declared artifacts exist.
    pub fn finish(&self) -> CliResult<RunEnd> {
        let (present, missing): (Vec<String>, Vec<String>) =
            self.manifest.artifacts.iter().cloned().partition(|a| self.dir.join(a).exists());
        let end = RunEnd { finished_unix_ms: now_ms(), artifacts: present, missing };
        fs::write(self.dir.join(MANIFEST_END), serde_json::to_string_pretty(&end)?)?;
        Ok(end)
    }
}

pub fn read_manifest(dir: &Path) -> CliResult<RunManifest> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| crate::CliError::Config(format!("{}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| crate::CliError::Config(format!("{}: {e}", p.display())))
}
