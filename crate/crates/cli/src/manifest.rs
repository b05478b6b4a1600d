use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use stackwfa::error::{Error, Result};

/// What a command did: its resolved configuration, the seeds it used, every
/// file it wrote and how long each phase took.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<String>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn config<T: Serialize>(&mut self, value: &T) {
        self.config = serde_json::to_value(value).expect("configs serialize to JSON");
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
    }

    /// Runs `f` and records its duration under `phase`.
    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.insert(phase.to_string(), start.elapsed().as_secs_f64());
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(path, text.as_bytes())
    }
}

/// Sibling path with `suffix` appended to the file name.
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
