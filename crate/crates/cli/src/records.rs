//! Run records and the append-only JSON-lines results file.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ensemblekit_core::metrics::{MetricReport, NormalizedReport};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("{}: another run holds the lock ({})", .results.display(), .lock.display())]
    Locked { results: PathBuf, lock: PathBuf },
    #[error("{path}: {source}", path = .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {detail}", path = .path.display())]
    Parse { path: PathBuf, line: usize, detail: String },
}

/// Metric values of one run; fields that do not apply are omitted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
}

impl Metrics {
    pub const NAMES: [&'static str; 4] = ["nll", "error_rate", "auc", "mse"];

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "nll" => self.nll,
            "error_rate" => self.error_rate,
            "auc" => self.auc,
            "mse" => self.mse,
            _ => None,
        }
    }
}

impl From<MetricReport> for Metrics {
    fn from(r: MetricReport) -> Self {
        Self {
            nll: r.nll,
            error_rate: r.error_rate,
            auc: r.auc,
            mse: r.mse,
        }
    }
}

impl From<NormalizedReport> for Metrics {
    fn from(r: NormalizedReport) -> Self {
        Self {
            nll: r.nll,
            error_rate: r.error_rate,
            auc: r.auc,
            mse: r.mse,
        }
    }
}

/// One (dataset, method, seed) evaluation on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub method: String,
    /// `stacking` or `ma` for neural ensemblers, empty otherwise.
    pub mode: String,
    pub seed: u64,
    pub metrics: Metrics,
    /// Metrics divided by the single-best model's on the same dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalized: Option<Metrics>,
    /// Test NLL divided by the NLL of the same configuration trained without dropout (sweeps only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout_relative_nll: Option<f64>,
    pub wall_time_seconds: f64,
    pub config: BTreeMap<String, String>,
}

impl RunRecord {
    /// Equality ignoring the wall-clock measurement.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.wall_time_seconds = other.wall_time_seconds;
        &a == other
    }
}

pub fn lock_path(results: &Path) -> PathBuf {
    let mut name = results.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".lock");
    results.with_file_name(name)
}

/// Exclusive writer for a results file. Holding one creates `<file>.lock`; a
/// second writer on the same file fails until the first is dropped.
#[derive(Debug)]
pub struct RecordWriter {
    path: PathBuf,
    lock: PathBuf,
    file: File,
}

impl RecordWriter {
    pub fn open(path: &Path) -> Result<Self, RecordError> {
        let lock = lock_path(path);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(RecordError::Locked {
                    results: path.to_path_buf(),
                    lock,
                })
            }
            Err(source) => return Err(RecordError::Io { path: lock, source }),
        }
        let file = OpenOptions::new().create(true).append(true).open(path);
        match file {
            Ok(file) => Ok(Self {
                path: path.to_path_buf(),
                lock,
                file,
            }),
            Err(source) => {
                let _ = fs::remove_file(&lock);
                Err(RecordError::Io {
                    path: path.to_path_buf(),
                    source,
                })
            }
        }
    }

    pub fn append(&mut self, record: &RunRecord) -> Result<(), RecordError> {
        let mut line = serde_json::to_string(record).expect("records serialize");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|source| RecordError::Io {
                path: self.path.clone(),
                source,
            })
    }
}

impl Drop for RecordWriter {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>, RecordError> {
    let file = File::open(path).map_err(|source| RecordError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| RecordError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RecordError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}
