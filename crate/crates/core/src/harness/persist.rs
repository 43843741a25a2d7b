//! Line-delimited trajectory files.
//!
//! Appends go through a temporary sibling file that is renamed over the
//! target, so a crash mid-write leaves the previous complete file behind.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::types::Trajectory;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix_ms: u64,
    pub elapsed_ms: u64,
}

/// Persisted form of a [`Trajectory`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub schema_version: u32,
    pub query_id: String,
    #[serde(flatten)]
    pub trajectory: Trajectory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl TrajectoryRecord {
    pub fn new(trajectory: Trajectory, timing: Option<Timing>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            query_id: trajectory.query.id.clone(),
            trajectory,
            timing,
        }
    }
}

impl From<Trajectory> for TrajectoryRecord {
    fn from(t: Trajectory) -> Self {
        Self::new(t, None)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("io on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_records(path: &Path) -> Result<Vec<TrajectoryRecord>, PersistError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| PersistError::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: TrajectoryRecord =
            serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        if rec.schema_version != SCHEMA_VERSION {
            return Err(schema(format!(
                "unsupported schema_version {}",
                rec.schema_version
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, PersistError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| PersistError::Schema {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

/// Adds `records` after the existing content of `path`.
pub fn append_records(path: &Path, records: &[TrajectoryRecord]) -> Result<(), PersistError> {
    let existing = match std::fs::read(path) {
        Ok(bytes) => bytes,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let file = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(&existing).map_err(io_err(&tmp))?;
        if !existing.is_empty() && !existing.ends_with(b"\n") {
            w.write_all(b"\n").map_err(io_err(&tmp))?;
        }
        for r in records {
            serde_json::to_writer(&mut w, r).map_err(|e| io_err(&tmp)(e.into()))?;
            w.write_all(b"\n").map_err(io_err(&tmp))?;
        }
        let file = w.into_inner().map_err(|e| io_err(&tmp)(e.into_error()))?;
        file.sync_all().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// Replaces `path` with exactly `records`.
pub fn write_records(path: &Path, records: &[TrajectoryRecord]) -> Result<(), PersistError> {
    match std::fs::remove_file(path) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(io_err(path)(e)),
    }
    append_records(path, records)
}
