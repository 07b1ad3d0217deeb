use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use emoq_core::config::RunConfig;
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Everything needed to re-run a command: the full config text, seeds,
/// inputs and tool versions.
#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: String,
    pub config_hash: String,
    pub seed: u64,
    pub data_seed: u64,
    pub tau: f64,
    pub beta1: f64,
    pub versions: BTreeMap<&'static str, String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_time_seconds: f64,
}

pub struct Recorder {
    command: String,
    started: Instant,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl Recorder {
    pub fn start(command: &str) -> Self {
        Recorder {
            command: command.to_string(),
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    /// Writes `bytes` to `dir/name` and records the output.
    pub fn write(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    pub fn finish(self, dir: &Path, cfg: &RunConfig) -> CliResult<()> {
        let mut versions = BTreeMap::new();
        versions.insert("emoq-cli", env!("CARGO_PKG_VERSION").to_string());
        versions.insert("emoq-core", emoq_core::VERSION.to_string());
        versions.insert("checkpoint-format", emoq_core::checkpoint::VERSION.to_string());
        let manifest = RunManifest {
            command: self.command,
            args: std::env::args().skip(1).collect(),
            config: cfg.to_text(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            data_seed: cfg.data_seed,
            tau: cfg.tau,
            beta1: cfg.train.optimizer.beta1,
            versions,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_time_seconds: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = dir.join("manifest.json");
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }
}
