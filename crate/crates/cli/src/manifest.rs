use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliResult;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command run: enough to repeat it and check its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    /// Resolved configuration.
    pub config: Value,
    pub threads: usize,
    /// File name to SHA-256 of inputs.
    pub inputs: BTreeMap<String, String>,
    /// File name to SHA-256 of outputs.
    pub outputs: BTreeMap<String, String>,
    /// Phase to wall-clock seconds.
    pub timings: BTreeMap<String, f64>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub struct Recorder {
    manifest: RunManifest,
    started: Instant,
}

impl Recorder {
    pub fn new(command: &str, seed: u64, config: &impl Serialize, threads: usize) -> Self {
        Self {
            manifest: RunManifest {
                command: command.into(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
                seed,
                config: serde_json::to_value(config).expect("serialisable"),
                threads,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                timings: BTreeMap::new(),
            },
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let h = sha256_file(path)?;
        self.manifest.inputs.insert(name(path), h);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> CliResult<()> {
        let h = sha256_file(path)?;
        self.manifest.outputs.insert(name(path), h);
        Ok(())
    }

    pub fn lap(&mut self, phase: &str) {
        self.manifest
            .timings
            .insert(phase.into(), self.started.elapsed().as_secs_f64());
    }

    pub fn write(mut self, dir: &Path) -> CliResult<()> {
        self.lap("total");
        let text = serde_json::to_string_pretty(&self.manifest).expect("serialisable");
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

fn name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}
