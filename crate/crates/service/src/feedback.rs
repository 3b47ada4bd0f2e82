//! Append-only feedback log of validated (dose, outcome) pairs, one JSON
//! document per line.

use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use latentdose_core::{DoseVector, Error, MetricVector, Result};
use serde::{Deserialize, Serialize};

pub const FEEDBACK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub version: u32,
    /// Client-generated when supplied; resubmitting an id is a no-op.
    pub id: String,
    pub session_id: String,
    pub u_new: DoseVector,
    pub outcome: MetricVector,
    pub accepted: bool,
    pub note: Option<String>,
    /// Client-reported time of the outcome; defaults to `received`.
    pub timestamp: DateTime<Utc>,
    pub received: DateTime<Utc>,
    /// Set when the session was already closed on receipt.
    pub late: bool,
}

pub struct FeedbackLog {
    path: PathBuf,
    records: Vec<FeedbackRecord>,
}

impl FeedbackLog {
    pub fn open(path: &Path) -> Result<Self> {
        let records = read_log(path)?;
        Ok(FeedbackLog { path: path.to_path_buf(), records })
    }

    pub fn records(&self) -> &[FeedbackRecord] {
        &self.records
    }

    pub fn find(&self, session_id: &str, id: &str) -> Option<&FeedbackRecord> {
        self.records.iter().find(|r| r.session_id == session_id && r.id == id)
    }

    pub fn append(&mut self, record: FeedbackRecord) -> Result<()> {
        if let Some(parent) = self.path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut line = serde_json::to_string(&record).expect("feedback serializes");
        line.push('\n');
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        self.records.push(record);
        Ok(())
    }
}

/// Reads every line of a feedback log; a missing file is an empty log.
pub fn read_log(path: &Path) -> Result<Vec<FeedbackRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: FeedbackRecord = serde_json::from_str(l)
                .map_err(|e| Error::Ingest { location: format!("{}:{}", path.display(), i + 1), message: e.to_string() })?;
            if r.version != FEEDBACK_VERSION {
                return Err(Error::Ingest {
                    location: format!("{}:{}", path.display(), i + 1),
                    message: format!("unsupported feedback version {}", r.version),
                });
            }
            Ok(r)
        })
        .collect()
}
