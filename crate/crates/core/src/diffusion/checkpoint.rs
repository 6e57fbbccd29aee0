use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Arch, DenoiserModel};
use super::schedule::ScheduleConfig;
use crate::error::{LairError, Result};
use crate::numfmt::to_json_pretty;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    arch: Arch,
    schedule: ScheduleConfig,
    frozen: bool,
    params: Vec<f64>,
}

/// Writes a model checkpoint as structured text.
pub fn save_checkpoint(
    path: &Path,
    model: &DenoiserModel,
    schedule: &ScheduleConfig,
) -> Result<()> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        arch: model.arch().clone(),
        schedule: *schedule,
        frozen: model.is_frozen(),
        params: model.params().to_vec(),
    };
    let text = to_json_pretty(&file).map_err(|e| LairError::Config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| LairError::io(path, e))
}

/// Reads a checkpoint back. The returned model is never frozen; callers that
/// need a reference take a fresh snapshot.
pub fn load_checkpoint(path: &Path) -> Result<(DenoiserModel, ScheduleConfig)> {
    let text = fs::read_to_string(path).map_err(|e| LairError::io(path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| LairError::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(LairError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let file: CheckpointFile = serde_json::from_value(raw).map_err(|e| LairError::Schema {
        line: 0,
        message: e.to_string(),
    })?;
    let model = DenoiserModel::from_params(file.arch, file.params)?;
    Ok((model, file.schedule))
}
