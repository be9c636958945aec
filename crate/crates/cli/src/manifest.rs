//! The `run.json` record written next to every command's outputs.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use shared_ris::config::RunConfig;
use shared_ris::io::write_atomic;
use shared_ris::Error;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: RunConfig,
    pub seed: u64,
    pub git: String,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: Option<f64>,
    pub success: Option<bool>,
    pub artifacts: Vec<PathBuf>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

impl RunManifest {
    pub fn start(command: &str, config: &RunConfig, argv: Vec<String>) -> Self {
        RunManifest {
            command: command.into(),
            argv,
            config: config.clone(),
            seed: config.train.seed,
            git: git_describe(),
            started: now(),
            finished: None,
            success: None,
            artifacts: Vec::new(),
        }
    }

    pub fn finish(&mut self, success: bool) {
        self.finished = Some(now());
        self.success = Some(success);
    }

    pub fn write(&self, path: &Path) -> Result<(), Error> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }
}
