//! HTTP API. Handlers read a published [`Snapshot`]; mutations are queued to
//! the writer thread and refused with 503 when the queue is full.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, SyncSender, TrySendError};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use sifall_core::fallnet::encode_tensor;
use sifall_core::{AlarmRecord, AlarmStatus, Verdict};
use tokio::sync::oneshot;

use crate::engine::{CheckpointInfo, Engine, IngestReply, Snapshot};
use crate::envelope::SegmentEnvelope;
use crate::GatewayError;

type Reply<T> = oneshot::Sender<Result<T, GatewayError>>;

pub enum Command {
    Ingest(Box<SegmentEnvelope>, Reply<IngestReply>),
    Verdict(u64, Verdict, Reply<AlarmRecord>),
    Checkpoint(Reply<CheckpointInfo>),
}

#[derive(Clone)]
pub struct AppState {
    pub queue: SyncSender<Command>,
    pub snapshot: Arc<RwLock<Snapshot>>,
    pub rejected: Arc<AtomicU64>,
}

/// How often the writer installs finished models while idle.
const IDLE_POLL: Duration = Duration::from_millis(50);

/// Moves `engine` onto its own thread behind a queue of `depth` commands.
/// The thread exits, returning the engine, once every sender is dropped.
pub fn spawn_writer(mut engine: Engine, depth: usize) -> (AppState, JoinHandle<Engine>) {
    let (tx, rx) = mpsc::sync_channel::<Command>(depth);
    let snapshot = Arc::new(RwLock::new(engine.snapshot()));
    let shared = Arc::clone(&snapshot);
    let handle = std::thread::Builder::new()
        .name("sifall-writer".into())
        .spawn(move || {
            let publish = |engine: &Engine| {
                *shared.write().expect("snapshot lock") = engine.snapshot();
            };
            loop {
                match rx.recv_timeout(IDLE_POLL) {
                    Ok(cmd) => {
                        match cmd {
                            Command::Ingest(env, reply) => {
                                let _ = reply.send(engine.ingest(*env));
                            }
                            Command::Verdict(id, v, reply) => {
                                let _ = reply.send(engine.verdict(id, v));
                            }
                            Command::Checkpoint(reply) => {
                                let _ = reply.send(engine.checkpoint());
                            }
                        }
                        publish(&engine);
                    }
                    Err(RecvTimeoutError::Timeout) => match engine.poll() {
                        Ok(0) => {}
                        Ok(_) => publish(&engine),
                        Err(e) => tracing::error!("retraining failed: {e}"),
                    },
                    Err(RecvTimeoutError::Disconnected) => break,
                }
            }
            engine
        })
        .expect("spawn writer");
    (
        AppState {
            queue: tx,
            snapshot,
            rejected: Arc::new(AtomicU64::new(0)),
        },
        handle,
    )
}

fn status_of(e: &GatewayError) -> StatusCode {
    match e {
        GatewayError::BadEnvelope(_) => StatusCode::BAD_REQUEST,
        GatewayError::Shape(_) => StatusCode::UNPROCESSABLE_ENTITY,
        GatewayError::Duplicate { .. } | GatewayError::Conflict(_) => StatusCode::CONFLICT,
        GatewayError::NotFound(_) => StatusCode::NOT_FOUND,
        GatewayError::Busy | GatewayError::Shutdown => StatusCode::SERVICE_UNAVAILABLE,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for GatewayError {
    fn into_response(self) -> Response {
        let status = status_of(&self);
        if status.is_server_error() && status != StatusCode::SERVICE_UNAVAILABLE {
            tracing::error!("{self}");
        }
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

impl AppState {
    fn read(&self) -> std::sync::RwLockReadGuard<'_, Snapshot> {
        self.snapshot.read().expect("snapshot lock")
    }

    async fn call<T>(&self, make: impl FnOnce(Reply<T>) -> Command) -> Result<T, GatewayError> {
        let (tx, rx) = oneshot::channel();
        match self.queue.try_send(make(tx)) {
            Ok(()) => {}
            Err(TrySendError::Full(_)) => {
                self.rejected.fetch_add(1, Ordering::Relaxed);
                return Err(GatewayError::Busy);
            }
            Err(TrySendError::Disconnected(_)) => return Err(GatewayError::Shutdown),
        }
        rx.await.map_err(|_| GatewayError::Shutdown)?
    }
}

async fn post_segment(State(st): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Json<IngestReply>, GatewayError> {
    let env = SegmentEnvelope::from_parts(|k| headers.get(k).and_then(|v| v.to_str().ok()), &body)?;
    st.call(|r| Command::Ingest(Box::new(env), r)).await.map(Json)
}

#[derive(Debug, Deserialize)]
struct AlarmQuery {
    status: Option<AlarmStatus>,
    #[serde(default)]
    offset: usize,
    limit: Option<usize>,
}

async fn list_alarms(State(st): State<AppState>, Query(q): Query<AlarmQuery>) -> Json<Vec<AlarmRecord>> {
    let snap = st.read();
    let items = snap
        .alarms
        .iter()
        .filter(|a| q.status.is_none_or(|s| a.status == s))
        .skip(q.offset)
        .take(q.limit.unwrap_or(usize::MAX))
        .cloned()
        .collect();
    Json(items)
}

async fn get_alarm(State(st): State<AppState>, Path(id): Path<u64>) -> Result<Json<AlarmRecord>, GatewayError> {
    st.read()
        .alarms
        .iter()
        .find(|a| a.id == id)
        .cloned()
        .map(Json)
        .ok_or(GatewayError::NotFound(id))
}

#[derive(Debug, Deserialize)]
struct TensorQuery {
    #[serde(default)]
    kind: TensorKind,
}

#[derive(Debug, Default, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorKind {
    #[default]
    Original,
    Reconstructed,
}

/// The alarm's input or its reconstruction by the current model, as `SFT1`.
async fn alarm_tensor(
    State(st): State<AppState>,
    Path(id): Path<u64>,
    Query(q): Query<TensorQuery>,
) -> Result<Response, GatewayError> {
    let (x, model) = {
        let snap = st.read();
        let x = snap.alarm_tensors.get(&id).cloned().ok_or(GatewayError::NotFound(id))?;
        (x, Arc::clone(&snap.model))
    };
    let out = match q.kind {
        TensorKind::Original => (*x).clone(),
        TensorKind::Reconstructed => tokio::task::spawn_blocking(move || model.reconstruct(&x).map(|(r, _)| r))
            .await
            .map_err(|_| GatewayError::Shutdown)??,
    };
    let bytes = encode_tensor(&[out.c, out.h, out.w], &out.data);
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

#[derive(Debug, Deserialize)]
struct VerdictBody {
    verdict: Verdict,
}

async fn post_verdict(
    State(st): State<AppState>,
    Path(id): Path<u64>,
    Json(body): Json<VerdictBody>,
) -> Result<Json<AlarmRecord>, GatewayError> {
    st.call(|r| Command::Verdict(id, body.verdict, r)).await.map(Json)
}

async fn model_stats(State(st): State<AppState>) -> Response {
    Json(st.read().stats.clone()).into_response()
}

async fn metrics(State(st): State<AppState>) -> Response {
    let mut m = st.read().metrics.clone();
    m.rejected = st.rejected.load(Ordering::Relaxed);
    Json(m).into_response()
}

async fn checkpoint(State(st): State<AppState>) -> Result<Json<CheckpointInfo>, GatewayError> {
    st.call(Command::Checkpoint).await.map(Json)
}

/// Largest accepted request body.
const BODY_LIMIT: usize = 16 << 20;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/segments", post(post_segment))
        .route("/v1/alarms", get(list_alarms))
        .route("/v1/alarms/{id}", get(get_alarm))
        .route("/v1/alarms/{id}/tensor", get(alarm_tensor))
        .route("/v1/alarms/{id}/verdict", post(post_verdict))
        .route("/v1/model/stats", get(model_stats))
        .route("/v1/model/checkpoint", post(checkpoint))
        .route("/v1/metrics", get(metrics))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}
