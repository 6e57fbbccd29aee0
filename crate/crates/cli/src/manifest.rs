use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use lair_core::numfmt::to_json_pretty;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Record of one invocation: what ran, with which resolved settings, and
/// where its artifacts went. Feeding the file back through `--config`
/// repeats the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn start<C: Serialize>(
        subcommand: &str,
        seed: u64,
        config: &C,
        inputs: Vec<PathBuf>,
    ) -> Result<Self, CliError> {
        Ok(RunManifest {
            subcommand: subcommand.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: serde_json::to_value(config).map_err(|e| CliError::Usage(e.to_string()))?,
            inputs,
            outputs: Vec::new(),
            started_unix: now(),
            finished_unix: None,
            notes: Vec::new(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = to_json_pretty(self).map_err(|e| CliError::Usage(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| io_error(path, e))
    }

    pub fn finish(&mut self, path: &Path, outputs: Vec<PathBuf>) -> Result<(), CliError> {
        self.outputs = outputs;
        self.finished_unix = Some(now());
        self.write(path)
    }
}

pub fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(lair_core::LairError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Settings from a config file, or defaults when there is none. A run
/// manifest is accepted too; its `config` object is used.
pub fn load_config<C: DeserializeOwned + Default>(
    path: Option<&Path>,
    subcommand: &str,
) -> Result<C, CliError> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let mut value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if let Some(ran) = value.get("subcommand").and_then(Value::as_str) {
        if ran != subcommand {
            return Err(CliError::Usage(format!(
                "{} is a manifest for `{ran}`, not `{subcommand}`",
                path.display()
            )));
        }
        value = value.get("config").cloned().unwrap_or(Value::Null);
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}
