mod common;

use std::io::Write;

use common::*;
use sifall_core::{AlarmStatus, Decision, Verdict};
use sifall_gateway::log::{EventLog, LogEntry};
use sifall_gateway::{Engine, GatewayError, RetrainMode};

/// Ingests `envs`, answering alarms alternately TP / FP.
fn drive(engine: &mut Engine, envs: &[sifall_gateway::SegmentEnvelope]) -> Vec<Decision> {
    let mut out = Vec::new();
    for env in envs {
        let r = engine.ingest(env.clone()).unwrap();
        if let Some(a) = r.alarm {
            let v = if a.id % 2 == 0 { Verdict::TruePositive } else { Verdict::FalsePositive };
            engine.verdict(a.id, v).unwrap();
        }
        out.push(r.decision);
    }
    out
}

/// State, model and decisions, without wall-clock timings.
fn fingerprint(engine: &Engine) -> (String, Vec<f32>, Vec<(u64, Decision, u64, u64)>) {
    (
        serde_json::to_string(engine.detector().state()).unwrap(),
        engine.detector().model().params().to_vec(),
        engine
            .decisions()
            .iter()
            .map(|d| (d.segment_id, d.decision, d.e.to_bits(), d.model_version))
            .collect(),
    )
}

#[test]
fn test_stream_exercises_every_decision_and_retrains() {
    let dir = tempfile::tempdir().unwrap();
    let s = settings();
    let mut engine = Engine::open(data_dir(dir.path(), &s), RetrainMode::Inline).unwrap();
    let decisions = drive(&mut engine, &stream(30));
    for d in [Decision::Fall, Decision::Suspicious, Decision::Normal] {
        assert!(decisions.contains(&d), "{d:?} missing from {decisions:?}");
    }
    let stats = engine.stats();
    assert!(stats.model_version > 0);
    assert_eq!(stats.pending_retrains, 0);
    assert!(engine.detector().alarms().all(|a| a.status != AlarmStatus::Open));
    assert!(stats.rolling_fpr.is_some());
}

#[test]
fn test_duplicate_and_bad_shape_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut engine = Engine::open(data_dir(dir.path(), &settings()), RetrainMode::Inline).unwrap();
    let env = envelope(1, false);
    engine.ingest(env.clone()).unwrap();
    assert!(matches!(engine.ingest(env), Err(GatewayError::Duplicate { segment_id: 1, .. })));
    let mut bad = envelope(2, false);
    bad.tensor = sifall_core::Tensor3::zeros(3, 32, 32);
    assert!(matches!(engine.ingest(bad), Err(GatewayError::Shape(_))));
    assert_eq!(engine.decisions().len(), 1);
}

#[test]
fn test_second_verdict_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let mut engine = Engine::open(data_dir(dir.path(), &settings()), RetrainMode::Inline).unwrap();
    let alarm = stream(30)
        .into_iter()
        .find_map(|e| engine.ingest(e).unwrap().alarm)
        .expect("a noisy segment alarms");
    let v0 = engine.stats().model_version;
    let rec = engine.verdict(alarm.id, Verdict::TruePositive).unwrap();
    assert_eq!(rec.status, AlarmStatus::ConfirmedFall);
    assert_eq!(engine.stats().model_version, v0, "TP does not retrain");
    assert!(matches!(engine.verdict(alarm.id, Verdict::FalsePositive), Err(GatewayError::Conflict(_))));
    assert!(matches!(engine.verdict(999, Verdict::FalsePositive), Err(GatewayError::NotFound(999))));
}

#[test]
fn test_false_positive_verdict_bumps_version() {
    let dir = tempfile::tempdir().unwrap();
    let s = sifall_gateway::Settings {
        retrain_on_normal: false,
        ..settings()
    };
    let mut engine = Engine::open(data_dir(dir.path(), &s), RetrainMode::Inline).unwrap();
    let alarm = stream(30)
        .into_iter()
        .find_map(|e| engine.ingest(e).unwrap().alarm)
        .unwrap();
    let v0 = engine.stats().model_version;
    engine.verdict(alarm.id, Verdict::FalsePositive).unwrap();
    assert_eq!(engine.stats().model_version, v0 + 1);
}

#[test]
fn test_reopen_restores_identical_state() {
    let envs = stream(40);
    let s = settings();

    let full = tempfile::tempdir().unwrap();
    let mut a = Engine::open(data_dir(full.path(), &s), RetrainMode::Inline).unwrap();
    drive(&mut a, &envs);

    let split = tempfile::tempdir().unwrap();
    let dir = data_dir(split.path(), &s);
    let mut b = Engine::open(dir.clone(), RetrainMode::Inline).unwrap();
    drive(&mut b, &envs[..17]);
    let before = fingerprint(&b);
    drop(b);
    let mut b = Engine::open(dir, RetrainMode::Inline).unwrap();
    assert_eq!(fingerprint(&b), before, "folding the log restores the state");
    drive(&mut b, &envs[17..]);

    assert_eq!(fingerprint(&a), fingerprint(&b));
    assert_eq!(a.stats(), b.stats());
}

#[test]
fn test_pending_jobs_survive_a_crash_between_decision_and_install() {
    let envs = stream(12);
    let s = settings();
    let full = tempfile::tempdir().unwrap();
    let mut a = Engine::open(data_dir(full.path(), &s), RetrainMode::Inline).unwrap();
    drive(&mut a, &envs);

    let split = tempfile::tempdir().unwrap();
    let dir = data_dir(split.path(), &s);
    let mut b = Engine::open(dir.clone(), RetrainMode::Inline).unwrap();
    drive(&mut b, &envs);
    drop(b);
    // Cut the log just before the last install, dropping everything after it,
    // and leave half a line behind.
    let (_, entries) = EventLog::open(&dir.events(), false).unwrap();
    let cut = entries.iter().rposition(|e| matches!(e, LogEntry::Install { .. })).unwrap();
    let mut text = String::new();
    for e in &entries[..cut] {
        text.push_str(&serde_json::to_string(e).unwrap());
        text.push('\n');
    }
    std::fs::write(dir.events(), text).unwrap();
    std::fs::OpenOptions::new()
        .append(true)
        .open(dir.events())
        .unwrap()
        .write_all(b"{\"kind\":\"inst")
        .unwrap();

    let mut b = Engine::open(dir, RetrainMode::Inline).unwrap();
    assert_eq!(b.pending_jobs(), 0, "the lost job was re-run on open");
    let open: Vec<u64> = b.detector().alarms().filter(|a| a.status == AlarmStatus::Open).map(|a| a.id).collect();
    for id in open {
        let v = if id % 2 == 0 { Verdict::TruePositive } else { Verdict::FalsePositive };
        b.verdict(id, v).unwrap();
    }
    let rest: Vec<_> = envs.iter().filter(|e| !b.has_segment(&e.trace_id, e.segment_id)).cloned().collect();
    drive(&mut b, &rest);
    assert_eq!(fingerprint(&a), fingerprint(&b));
}

#[test]
fn test_background_retraining_matches_inline() {
    let envs = stream(25);
    let s = settings();
    let inline = tempfile::tempdir().unwrap();
    let mut a = Engine::open(data_dir(inline.path(), &s), RetrainMode::Inline).unwrap();
    let bg = tempfile::tempdir().unwrap();
    let dir = data_dir(bg.path(), &s);
    let mut b = Engine::open(dir.clone(), RetrainMode::Background).unwrap();
    // Waiting after every segment makes installs land at the same points.
    for env in &envs {
        a.ingest(env.clone()).unwrap();
        b.ingest(env.clone()).unwrap();
        b.wait_idle().unwrap();
    }
    assert_eq!(fingerprint(&a), fingerprint(&b));
    drop(b);
    let b = Engine::open(dir, RetrainMode::Background).unwrap();
    assert_eq!(fingerprint(&a), fingerprint(&b));
}

#[test]
fn test_uninitialised_dir_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let r = Engine::open(sifall_gateway::DataDir::new(dir.path()), RetrainMode::Inline);
    assert!(matches!(r, Err(GatewayError::NotInitialised(_))));
}

#[test]
fn test_checkpoint_writes_current_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut engine = Engine::open(data_dir(dir.path(), &settings()), RetrainMode::Inline).unwrap();
    drive(&mut engine, &stream(5));
    let info = engine.checkpoint().unwrap();
    assert_eq!(info.model_version, engine.stats().model_version);
    let net: sifall_core::FallNet<f32> = sifall_core::fallnet::load_checkpoint(&info.path).unwrap();
    assert_eq!(net.params(), engine.detector().model().params());
}
