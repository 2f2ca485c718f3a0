use std::path::Path;

use anyhow::{Context, Result};
use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;
use serde_json::Value;

use crate::config::RunConfig;

#[derive(Debug, Serialize)]
pub struct Versions {
    pub evdet: &'static str,
    pub evdet_cli: &'static str,
}

/// Everything needed to repeat a run: the exact command line, the fully
/// resolved config and the seed, plus when and with what it ran.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: RunConfig,
    pub seed: u64,
    pub versions: Versions,
    pub started_at: String,
    pub finished_at: String,
    /// Subcommand-specific details (records written, files produced, ...).
    pub outputs: Value,
}

pub struct RunClock {
    started: DateTime<Utc>,
}

impl RunClock {
    pub fn start() -> Self {
        Self { started: Utc::now() }
    }

    pub fn finish(self, command: &str, config: &RunConfig, seed: u64, outputs: Value) -> Manifest {
        Manifest {
            command: command.to_string(),
            args: std::env::args().collect(),
            config: config.clone(),
            seed,
            versions: Versions { evdet: evdet::VERSION, evdet_cli: env!("CARGO_PKG_VERSION") },
            started_at: self.started.to_rfc3339_opts(SecondsFormat::Millis, true),
            finished_at: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            outputs,
        }
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)?;
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
