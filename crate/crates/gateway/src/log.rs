//! Append-only JSONL event log.
//!
//! Decision lines carry everything needed to rebuild the detector: the
//! score, the latent mean and the envelope as received. Folding the log from
//! the base state reproduces the single-writer state exactly.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sifall_core::{Decision, Verdict};

use crate::envelope::SegmentEnvelope;
use crate::GatewayError;

/// An envelope exactly as it arrived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredEnvelope {
    pub headers: BTreeMap<String, String>,
    /// Base64 of the binary body.
    pub body: String,
}

impl StoredEnvelope {
    pub fn of(env: &SegmentEnvelope) -> Self {
        Self {
            headers: env.headers().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            body: B64.encode(env.body()),
        }
    }

    pub fn decode(&self) -> Result<SegmentEnvelope, GatewayError> {
        let body = B64
            .decode(&self.body)
            .map_err(|e| GatewayError::BadEnvelope(format!("stored body: {e}")))?;
        SegmentEnvelope::from_parts(|k| self.headers.get(k).map(String::as_str), &body)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionEntry {
    /// Stream time of the segment end.
    pub t: f64,
    pub e: f64,
    pub alpha: f64,
    pub decision: Decision,
    pub model_version: u64,
    pub gamma: f64,
    pub segment_id: u64,
    pub trace_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alarm_id: Option<u64>,
    pub inference_ms: f64,
    pub update_ms: f64,
    pub mu: Vec<f64>,
    pub envelope: StoredEnvelope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Decision(DecisionEntry),
    Verdict { alarm_id: u64, verdict: Verdict },
    /// The model of `version` became the published one.
    Install { version: u64 },
}

pub struct EventLog {
    file: File,
    path: PathBuf,
    fsync: bool,
}

impl EventLog {
    /// Opens (creating if needed) and reads back every complete line. A torn
    /// final line, left by a crash mid-append, is cut off.
    pub fn open(path: &Path, fsync: bool) -> Result<(Self, Vec<LogEntry>), GatewayError> {
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut text = String::new();
        file.read_to_string(&mut text)
            .map_err(|e| GatewayError::Corrupt(format!("{}: {e}", path.display())))?;
        let (entries, complete) = parse(&text, path)?;
        if complete < text.len() {
            tracing::warn!(bytes = text.len() - complete, "dropping torn tail of the event log");
            file.set_len(complete as u64)?;
            file.seek(SeekFrom::End(0))?;
        }
        Ok((
            Self {
                file,
                path: path.to_path_buf(),
                fsync,
            },
            entries,
        ))
    }

    /// Reads every complete line without touching the file, so it is safe
    /// while another process appends.
    pub fn read(path: &Path) -> Result<Vec<LogEntry>, GatewayError> {
        let text = std::fs::read_to_string(path)?;
        Ok(parse(&text, path)?.0)
    }

    pub fn append(&mut self, entry: &LogEntry) -> Result<(), GatewayError> {
        let mut line = serde_json::to_string(entry)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        if self.fsync {
            self.file.sync_data()?;
        }
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Entries of the complete lines of `text`, and the byte length they span.
fn parse(text: &str, path: &Path) -> Result<(Vec<LogEntry>, usize), GatewayError> {
    let complete = text.rfind('\n').map_or(0, |i| i + 1);
    let mut entries = Vec::new();
    for (n, line) in text[..complete].lines().enumerate() {
        let entry = serde_json::from_str(line)
            .map_err(|e| GatewayError::Corrupt(format!("{} line {}: {e}", path.display(), n + 1)))?;
        entries.push(entry);
    }
    Ok((entries, complete))
}
