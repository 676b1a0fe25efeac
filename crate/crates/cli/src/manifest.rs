use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::Serialize;

/// Audit record written next to a command's primary output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub threads: usize,
    pub duration_secs: f64,
}

pub struct Recorder {
    started: Instant,
    manifest: RunManifest,
}

impl Recorder {
    pub fn start(command: &str, config: &impl Serialize, threads: usize) -> Self {
        Self {
            started: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
                seeds: BTreeMap::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                threads,
                duration_secs: 0.0,
            },
        }
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.manifest.seeds.insert(name.to_string(), seed);
    }

    pub fn input(&mut self, path: &Path) {
        self.manifest.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.to_path_buf());
    }

    /// Write `<primary>.manifest.json`.
    pub fn finish(mut self, primary: &Path) -> anyhow::Result<()> {
        self.manifest.duration_secs = self.started.elapsed().as_secs_f64();
        let path = sidecar(primary, "manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

/// `out.ckpt` -> `out.ckpt.<ext>`
pub fn sidecar(primary: &Path, ext: &str) -> PathBuf {
    let mut s = primary.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}
