mod common;

use std::sync::atomic::AtomicU64;
use std::sync::{mpsc, Arc, RwLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use common::*;
use http_body_util::BodyExt;
use serde_json::Value;
use sifall_core::fallnet::decode_tensor;
use sifall_gateway::server::{router, spawn_writer, AppState};
use sifall_gateway::{Engine, RetrainMode, SegmentEnvelope};
use tower::ServiceExt;

fn post_segment(env: &SegmentEnvelope) -> Request<Body> {
    let mut req = Request::post("/v1/segments");
    for (k, v) in env.headers() {
        req = req.header(k, v);
    }
    req.body(Body::from(env.body())).unwrap()
}

fn post_json(uri: &str, body: Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn send_json(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let (status, body) = send(app, req).await;
    (status, serde_json::from_slice(&body).unwrap())
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn test_segment_alarm_verdict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(data_dir(dir.path(), &settings()), RetrainMode::Background).unwrap();
    let (state, writer) = spawn_writer(engine, 8);
    let app = router(state);

    let mut alarm_id = None;
    for env in stream(10) {
        let (status, reply) = send_json(&app, post_segment(&env)).await;
        assert_eq!(status, StatusCode::OK, "{reply}");
        assert_eq!(reply["segmentId"], env.segment_id);
        if let Some(id) = reply["alarm"]["id"].as_u64() {
            alarm_id.get_or_insert(id);
        }
    }
    let id = alarm_id.expect("a noisy segment alarms");

    let (status, _) = send_json(&app, post_segment(&envelope(3, false))).await;
    assert_eq!(status, StatusCode::CONFLICT, "duplicate segment");
    let mut bad = envelope(99, false);
    bad.tensor = sifall_core::Tensor3::zeros(3, 32, 16);
    assert_eq!(send(&app, post_segment(&bad)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let garbage = Request::post("/v1/segments").body(Body::from("nope")).unwrap();
    assert_eq!(send(&app, garbage).await.0, StatusCode::BAD_REQUEST);

    let (status, list) = send_json(&app, get("/v1/alarms?status=open")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(list.as_array().unwrap().iter().any(|a| a["id"] == id));
    let (status, one) = send_json(&app, get(&format!("/v1/alarms/{id}"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(one["status"], "open");
    assert_eq!(send(&app, get("/v1/alarms/12345")).await.0, StatusCode::NOT_FOUND);

    for kind in ["original", "reconstructed"] {
        let (status, bytes) = send(&app, get(&format!("/v1/alarms/{id}/tensor?kind={kind}"))).await;
        assert_eq!(status, StatusCode::OK);
        let t = decode_tensor(&bytes).unwrap();
        assert_eq!(t.dims, vec![C, F, 32], "{kind}");
    }

    let uri = format!("/v1/alarms/{id}/verdict");
    let (status, rec) = send_json(&app, post_json(&uri, serde_json::json!({"verdict": "false_positive"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(rec["status"], "false_positive");
    let (status, _) = send_json(&app, post_json(&uri, serde_json::json!({"verdict": "true_positive"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (_, stats) = send_json(&app, get("/v1/model/stats")).await;
    assert_eq!(stats["bufferCapacity"], 6);
    assert!(stats["alpha"].as_f64().unwrap() > 0.0);
    let (_, metrics) = send_json(&app, get("/v1/metrics")).await;
    assert_eq!(metrics["segments"], 10);
    assert_eq!(metrics["alarms"]["falsePositive"], 1);

    let (status, ck) = send_json(&app, Request::post("/v1/model/checkpoint").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert!(std::path::Path::new(ck["path"].as_str().unwrap()).exists());

    drop(app);
    let mut engine = tokio::task::spawn_blocking(move || writer.join().unwrap()).await.unwrap();
    engine.wait_idle().unwrap();
    assert_eq!(engine.decisions().len(), 10);
}

#[tokio::test]
async fn test_full_queue_answers_503() {
    let dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(data_dir(dir.path(), &settings()), RetrainMode::Inline).unwrap();
    let snapshot = Arc::new(RwLock::new(engine.snapshot()));
    // Nobody drains this queue.
    let (queue, _rx) = mpsc::sync_channel(1);
    let rejected = Arc::new(AtomicU64::new(0));
    let app = router(AppState {
        queue,
        snapshot,
        rejected,
    });
    let first = app.clone().oneshot(post_segment(&envelope(1, false)));
    let pending = tokio::spawn(first);
    tokio::task::yield_now().await;
    let mut saw_busy = false;
    for id in 2..6 {
        if send(&app, post_segment(&envelope(id, false))).await.0 == StatusCode::SERVICE_UNAVAILABLE {
            saw_busy = true;
        }
    }
    assert!(saw_busy);
    let (_, metrics) = send_json(&app, get("/v1/metrics")).await;
    assert!(metrics["rejected"].as_u64().unwrap() >= 1);
    pending.abort();
}
