//! Run manifests.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    pub seeds: Vec<u64>,
    pub stages: Vec<Stage>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config_text: &str, seeds: Vec<u64>) -> Self {
        Self {
            command: command.into(),
            config_hash: hash_hex(config_text.as_bytes()),
            code_version: env!("CARGO_PKG_VERSION").into(),
            seeds,
            stages: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    /// Runs `f` and records its wall time under `name`.
    pub fn time<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.stages.push(Stage {
            name: name.into(),
            ms: t.elapsed().as_secs_f64() * 1e3,
        });
        out
    }

    /// Writes via a temporary file and a rename so that a present manifest
    /// always marks a finished run.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let tmp = dir.join(format!(".{MANIFEST}.tmp"));
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(tmp, dir.join(MANIFEST))
    }
}

pub fn is_complete(dir: &Path) -> bool {
    dir.join(MANIFEST).is_file()
}

pub fn hash_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
