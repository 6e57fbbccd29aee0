//! Line-delimited dataset files: a manifest header line followed by one JSON
//! record per line, with every real written to 17 significant digits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{
    CandidateGroup, DataPoint, PairRecord, Prompt, COND_DIM, DATA_DIM, REWARD_FN_ID,
};
use crate::error::{LairError, Result};
use crate::numfmt::to_json_line;

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Groups,
    Pairs,
    Pretrain,
    Prompts,
}

/// Header line of every dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub kind: RecordKind,
    pub data_dim: usize,
    pub cond_dim: usize,
    pub prompts: usize,
    /// Number of record lines after the header.
    pub records: usize,
    /// Total samples across records (candidates for groups, two per pair).
    pub candidates: usize,
    pub seed: u64,
    pub reward_fn: String,
}

impl DatasetManifest {
    pub fn new(kind: RecordKind, seed: u64) -> Self {
        DatasetManifest {
            format_version: DATASET_VERSION,
            kind,
            data_dim: DATA_DIM,
            cond_dim: COND_DIM,
            prompts: 0,
            records: 0,
            candidates: 0,
            seed,
            reward_fn: REWARD_FN_ID.to_string(),
        }
    }
}

/// Record types that can live in a dataset file.
pub trait DatasetRecord: Serialize + DeserializeOwned {
    const KIND: RecordKind;
    fn prompt_id(&self) -> Option<&str>;
    fn sample_count(&self) -> usize;
    /// Checks shape and content against the header dimensions.
    fn check(&self, data_dim: usize, cond_dim: usize) -> std::result::Result<(), String>;
}

fn check_vec(name: &str, v: &[f64], dim: usize) -> std::result::Result<(), String> {
    if v.len() != dim {
        return Err(format!("{name} has dimension {}, expected {dim}", v.len()));
    }
    Ok(())
}

impl DatasetRecord for CandidateGroup {
    const KIND: RecordKind = RecordKind::Groups;

    fn prompt_id(&self) -> Option<&str> {
        Some(&self.prompt_id)
    }

    fn sample_count(&self) -> usize {
        self.candidates.len()
    }

    fn check(&self, data_dim: usize, cond_dim: usize) -> std::result::Result<(), String> {
        if self.candidates.is_empty() {
            return Err("empty candidate list".into());
        }
        if self.candidates.len() < 2 {
            return Err("group has a single candidate".into());
        }
        check_vec("c", &self.c, cond_dim)?;
        for cand in &self.candidates {
            check_vec("x0", &cand.x0, data_dim)?;
        }
        Ok(())
    }
}

impl DatasetRecord for PairRecord {
    const KIND: RecordKind = RecordKind::Pairs;

    fn prompt_id(&self) -> Option<&str> {
        Some(&self.prompt_id)
    }

    fn sample_count(&self) -> usize {
        2
    }

    fn check(&self, data_dim: usize, cond_dim: usize) -> std::result::Result<(), String> {
        check_vec("c", &self.c, cond_dim)?;
        check_vec("x_a", &self.x_a, data_dim)?;
        check_vec("x_b", &self.x_b, data_dim)
    }
}

impl DatasetRecord for DataPoint {
    const KIND: RecordKind = RecordKind::Pretrain;

    fn prompt_id(&self) -> Option<&str> {
        None
    }

    fn sample_count(&self) -> usize {
        1
    }

    fn check(&self, data_dim: usize, cond_dim: usize) -> std::result::Result<(), String> {
        check_vec("c", &self.c, cond_dim)?;
        check_vec("x0", &self.x0, data_dim)
    }
}

impl DatasetRecord for Prompt {
    const KIND: RecordKind = RecordKind::Prompts;

    fn prompt_id(&self) -> Option<&str> {
        Some(&self.prompt_id)
    }

    fn sample_count(&self) -> usize {
        0
    }

    fn check(&self, _data_dim: usize, cond_dim: usize) -> std::result::Result<(), String> {
        check_vec("c", &self.c, cond_dim)
    }
}

/// Fills in the counts of `manifest` from `records`.
pub fn manifest_for<T: DatasetRecord>(records: &[T], seed: u64) -> DatasetManifest {
    let mut manifest = DatasetManifest::new(T::KIND, seed);
    manifest.records = records.len();
    manifest.candidates = records.iter().map(|r| r.sample_count()).sum();
    let mut ids: Vec<&str> = records.iter().filter_map(|r| r.prompt_id()).collect();
    ids.sort_unstable();
    ids.dedup();
    manifest.prompts = ids.len();
    manifest
}

pub fn save_records<T: DatasetRecord>(
    path: &Path,
    manifest: &DatasetManifest,
    records: &[T],
) -> Result<()> {
    if manifest.kind != T::KIND || manifest.records != records.len() {
        return Err(LairError::Contract(format!(
            "manifest describes {} {:?} records, got {} {:?}",
            manifest.records,
            manifest.kind,
            records.len(),
            T::KIND
        )));
    }
    let file = File::create(path).map_err(|e| LairError::io(path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{}", record_line(manifest)?).map_err(|e| LairError::io(path, e))?;
    for rec in records {
        writeln!(out, "{}", record_line(rec)?).map_err(|e| LairError::io(path, e))?;
    }
    out.flush().map_err(|e| LairError::io(path, e))
}

fn json_error(line: usize, e: serde_json::Error) -> LairError {
    use serde_json::error::Category;
    match e.classify() {
        Category::Data => LairError::Schema {
            line,
            message: e.to_string(),
        },
        _ => LairError::Parse {
            line,
            message: e.to_string(),
        },
    }
}

pub fn load_records<T: DatasetRecord>(path: &Path) -> Result<(DatasetManifest, Vec<T>)> {
    let file = File::open(path).map_err(|e| LairError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| LairError::io(path, e))?,
        None => {
            return Err(LairError::Parse {
                line: 1,
                message: "missing manifest header".into(),
            })
        }
    };
    let raw: serde_json::Value = serde_json::from_str(&header).map_err(|e| json_error(1, e))?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if version != DATASET_VERSION {
        return Err(LairError::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let manifest: DatasetManifest = serde_json::from_value(raw).map_err(|e| json_error(1, e))?;
    if manifest.kind != T::KIND {
        return Err(LairError::Schema {
            line: 1,
            message: format!(
                "file holds {:?} records, expected {:?}",
                manifest.kind,
                T::KIND
            ),
        });
    }
    let mut records = Vec::with_capacity(manifest.records);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| LairError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| json_error(lineno, e))?;
        rec.check(manifest.data_dim, manifest.cond_dim)
            .map_err(|message| LairError::Schema {
                line: lineno,
                message,
            })?;
        records.push(rec);
    }
    if records.len() != manifest.records {
        return Err(LairError::Parse {
            line: records.len() + 2,
            message: format!(
                "manifest promises {} records but the file ends after {} (truncated?)",
                manifest.records,
                records.len()
            ),
        });
    }
    let total: usize = records.iter().map(|r| r.sample_count()).sum();
    if total != manifest.candidates {
        return Err(LairError::Schema {
            line: 1,
            message: format!(
                "manifest counts {} samples, payload has {total}",
                manifest.candidates
            ),
        });
    }
    Ok((manifest, records))
}

pub fn save_dataset(
    groups: &[CandidateGroup],
    manifest: &DatasetManifest,
    path: &Path,
) -> Result<()> {
    save_records(path, manifest, groups)
}

pub fn load_dataset(path: &Path) -> Result<(DatasetManifest, Vec<CandidateGroup>)> {
    load_records(path)
}

/// The JSON line a record is written as.
pub fn record_line<T: Serialize>(record: &T) -> Result<String> {
    to_json_line(record).map_err(|e| LairError::Config(e.to_string()))
}
