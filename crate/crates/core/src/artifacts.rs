//! On-disk formats: lumen and Q-table JSON, learning-curve CSV and
//! trajectory JSON lines. Every writer goes through [`write_atomic`], so a
//! failed run never leaves a partial file behind.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{StateId, TraceRecord, Trajectory};
use crate::geometry::LumenMap;
use crate::mechanics::Action;
use crate::qlearning::{EpisodeResult, QTable, TerminalTag};

pub const QTABLE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl ArtifactError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        ArtifactError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, reason: impl Into<String>) -> Self {
        ArtifactError::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

/// Writes through a temp file in the target directory, then renames.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<(), ArtifactError>
where
    F: FnOnce(&mut dyn Write) -> io::Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| ArtifactError::io(path, e))?;
    {
        let mut buf = io::BufWriter::new(tmp.as_file_mut());
        fill(&mut buf).map_err(|e| ArtifactError::io(path, e))?;
        buf.flush().map_err(|e| ArtifactError::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| ArtifactError::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ArtifactError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| ArtifactError::format(path, e.to_string()))?;
    write_atomic(path, |w| {
        w.write_all(text.as_bytes())?;
        w.write_all(b"\n")
    })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ArtifactError> {
    let text = fs::read_to_string(path).map_err(|e| ArtifactError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| ArtifactError::format(path, e.to_string()))
}

pub fn save_lumen(path: &Path, lumen: &LumenMap) -> Result<(), ArtifactError> {
    write_json(path, lumen)
}

pub fn load_lumen(path: &Path) -> Result<LumenMap, ArtifactError> {
    let lumen: LumenMap = read_json(path)?;
    lumen.validate().map_err(|e| ArtifactError::format(path, e))?;
    Ok(lumen)
}

/// One stored Q-value. Terminal states are never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QEntry {
    pub cell_x: i64,
    pub cell_y: i64,
    pub heading_bin: u32,
    pub action: Action,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QTableFile {
    pub schema_version: u32,
    pub entries: Vec<QEntry>,
}

impl QTableFile {
    pub fn from_table(q: &QTable<StateId>) -> Self {
        let entries = q
            .entries()
            .into_iter()
            .map(|(s, action, value)| QEntry {
                cell_x: s.cell_x,
                cell_y: s.cell_y,
                heading_bin: s.heading_bin,
                action,
                value,
            })
            .collect();
        QTableFile {
            schema_version: QTABLE_SCHEMA_VERSION,
            entries,
        }
    }

    pub fn to_table(&self) -> QTable<StateId> {
        let mut q = QTable::new();
        for e in &self.entries {
            let s = StateId {
                cell_x: e.cell_x,
                cell_y: e.cell_y,
                heading_bin: e.heading_bin,
                terminal_tag: TerminalTag::None,
            };
            q.set(&s, e.action, e.value);
        }
        q
    }
}

pub fn save_qtable(path: &Path, q: &QTable<StateId>) -> Result<(), ArtifactError> {
    write_json(path, &QTableFile::from_table(q))
}

pub fn load_qtable(path: &Path) -> Result<QTable<StateId>, ArtifactError> {
    let file: QTableFile = read_json(path)?;
    if file.schema_version != QTABLE_SCHEMA_VERSION {
        return Err(ArtifactError::format(
            path,
            format!("schema_version {} (expected {QTABLE_SCHEMA_VERSION})", file.schema_version),
        ));
    }
    if let Some(e) = file.entries.iter().find(|e| !e.value.is_finite()) {
        return Err(ArtifactError::format(path, format!("non-finite value {}", e.value)));
    }
    Ok(file.to_table())
}

/// CSV with header `episode,outcome,steps,return`.
pub fn write_curve_csv<T>(path: &Path, curve: &[EpisodeResult<T>]) -> Result<(), ArtifactError> {
    write_atomic(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["episode", "outcome", "steps", "return"])?;
        for (i, r) in curve.iter().enumerate() {
            csv.write_record([
                i.to_string(),
                r.outcome.as_str().to_string(),
                r.steps.to_string(),
                r.return_value.to_string(),
            ])?;
        }
        csv.flush()
    })
}

/// One JSON object per line, one line per step.
pub fn export_trajectory(path: &Path, trajectory: &[TraceRecord]) -> Result<(), ArtifactError> {
    write_atomic(path, |w| {
        for rec in trajectory {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory, ArtifactError> {
    let file = fs::File::open(path).map_err(|e| ArtifactError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ArtifactError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| ArtifactError::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
