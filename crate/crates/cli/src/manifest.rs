//! Run manifests. Each command writes one before its outputs, with status
//! `running`, and rewrites it as `complete` once every output has been
//! written and checked. A manifest left at `running` marks a partial run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    /// SHA-256 of the compact JSON encoding of `config`.
    pub config_digest: String,
    pub seeds: BTreeMap<String, u64>,
    pub versions: BTreeMap<String, String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub status: RunStatus,
    pub started_unix_ms: u64,
    pub finished_unix_ms: Option<u64>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Where the manifest for an output lives: inside output directories,
/// next to output files.
pub fn manifest_path(out: &Path, out_is_dir: bool) -> PathBuf {
    if out_is_dir {
        out.join(MANIFEST_FILE)
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub fn digest(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("json value");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("usamkit-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("usamkit-core".to_string(), usamkit::VERSION.to_string()),
        ("record_schema".to_string(), usamkit::io::SCHEMA_VERSION.to_string()),
        (
            "token_layout".to_string(),
            usamkit::usam::TOKEN_LAYOUT_VERSION.to_string(),
        ),
    ])
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seeds: BTreeMap<String, u64>) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        Ok(Self {
            command: command.to_string(),
            config_digest: digest(&config),
            config,
            seeds,
            versions: versions(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            status: RunStatus::Running,
            started_unix_ms: now_ms(),
            finished_unix_ms: None,
        })
    }

    fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn begin(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        self.write(path)
    }

    /// Checks that every output exists and is non-empty, then marks the run
    /// complete.
    pub fn finish(&mut self, path: &Path) -> Result<()> {
        for out in &self.outputs {
            let meta = std::fs::metadata(out).with_context(|| format!("output {} missing", out.display()))?;
            anyhow::ensure!(meta.len() > 0, "output {} is empty", out.display());
        }
        self.status = RunStatus::Complete;
        self.finished_unix_ms = Some(now_ms());
        self.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_paths() {
        assert_eq!(manifest_path(Path::new("a/b.csv"), false), PathBuf::from("a/b.csv.manifest.json"));
        assert_eq!(manifest_path(Path::new("a/heads"), true), PathBuf::from("a/heads/manifest.json"));
    }

    #[test]
    fn digest_is_stable_and_config_sensitive() {
        let a = serde_json::json!({"n": 5, "seed": 1});
        let b = serde_json::json!({"n": 6, "seed": 1});
        assert_eq!(digest(&a), digest(&a.clone()));
        assert_ne!(digest(&a), digest(&b));
        assert_eq!(digest(&a).len(), 64);
    }

    #[test]
    fn finish_rejects_missing_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut m = RunManifest::new("x", &serde_json::json!({}), BTreeMap::new()).unwrap();
        m.outputs.push(dir.path().join("nope.csv"));
        m.begin(&path).unwrap();
        assert!(m.finish(&path).is_err());
        assert_eq!(RunManifest::read(&path).unwrap().status, RunStatus::Running);
    }
}
