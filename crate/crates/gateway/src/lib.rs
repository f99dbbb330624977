//! Back-end service for SiFall: segment ingestion, the alarm and verdict API,
//! crash-safe persistence and dataset replay.
//!
//! All mutations go through one [`Engine`] owned by a single writer thread.
//! The engine appends every decision, verdict and model installation to a
//! JSONL event log under the data directory. Reopening the directory folds
//! that log and recovers the exact detector state.

pub mod engine;
pub mod envelope;
pub mod log;
pub mod replay;
pub mod server;
pub mod settings;

use std::path::PathBuf;

use thiserror::Error;

pub use engine::{DataDir, Engine, IngestReply, Metrics, ModelStats, RetrainMode};
pub use envelope::SegmentEnvelope;
pub use replay::{replay, ReplayOptions, ReplayOutcome};
pub use server::{router, spawn_writer, AppState};
pub use settings::Settings;

/// Environment variable naming the persistence root.
pub const DATA_DIR_ENV: &str = "SIFALL_DATA_DIR";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("malformed segment: {0}")]
    BadEnvelope(String),
    #[error("segment shape: {0}")]
    Shape(String),
    #[error("segment {segment_id} of trace {trace_id} was already ingested")]
    Duplicate { trace_id: String, segment_id: u64 },
    #[error("unknown alarm {0}")]
    NotFound(u64),
    #[error("alarm {0} already has a verdict")]
    Conflict(u64),
    #[error("event log: {0}")]
    Corrupt(String),
    #[error("{0} holds no base model; run `sifall train` first")]
    NotInitialised(PathBuf),
    #[error(transparent)]
    Model(#[from] sifall_core::FallNetError),
    #[error(transparent)]
    Online(sifall_core::OnlineError),
    #[error("engine stopped after a failed write: {0}")]
    Poisoned(String),
    #[error("ingest queue is full")]
    Busy,
    #[error("engine is shut down")]
    Shutdown,
}

impl From<sifall_core::OnlineError> for GatewayError {
    fn from(e: sifall_core::OnlineError) -> Self {
        use sifall_core::OnlineError as O;
        match e {
            O::UnknownAlarm(id) => Self::NotFound(id),
            O::AlarmClosed(id) => Self::Conflict(id),
            O::Model(m) => Self::Model(m),
            other => Self::Online(other),
        }
    }
}
