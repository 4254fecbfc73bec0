use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sclle::archive::write_atomic;
use sclle::{Error, Result};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub path: PathBuf,
    /// `sha256:<hex>` over the file bytes.
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed,
}

/// Provenance record written into every output directory before any work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub checkpoint: Option<CheckpointRef>,
    pub tag: Option<String>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: RunStatus,
    pub message: Option<String>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn content_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(format!("sha256:{}", hex::encode(Sha256::digest(bytes))))
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv: std::env::args().collect(),
            config,
            seeds: BTreeMap::new(),
            checkpoint: None,
            tag: None,
            started_at: now(),
            finished_at: None,
            status: RunStatus::Running,
            message: None,
        }
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.into(), value);
        self
    }

    pub fn checkpoint(mut self, path: &Path) -> Result<Self> {
        self.checkpoint = Some(CheckpointRef {
            path: path.to_path_buf(),
            content_hash: content_hash(path)?,
        });
        Ok(self)
    }

    pub fn tag(mut self, tag: &str) -> Self {
        self.tag = Some(tag.into());
        self
    }

    /// Creates `dir` if needed and writes the manifest into it.
    pub fn begin(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        self.write(dir)
    }

    pub fn finish(&mut self, dir: &Path, status: RunStatus, message: Option<String>) -> Result<()> {
        self.finished_at = Some(now());
        self.status = status;
        self.message = message;
        self.write(dir)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(&dir.join(RUN_MANIFEST), &bytes)
    }
}
