use std::path::Path;
use std::process::Command;

use sifall_gateway::replay::load_traces;

fn sifall(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_sifall"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "sifall {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn test_simulate_then_frontend_reproduces_the_segments() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let direct = dir.path().join("direct.jsonl");
    let via_csi = dir.path().join("via_csi.jsonl");
    sifall(&["simulate", "--out", p(&corpus), "--traces", "1", "--kinds", "Sit,WalkFall", "--segments", p(&direct)]);
    assert!(corpus.join("trace-000.csi.jsonl").exists());
    assert!(corpus.join("trace-000.truth.jsonl").exists());
    sifall(&["frontend", "--corpus", p(&corpus), "--out", p(&via_csi)]);
    let a = load_traces(&direct).unwrap();
    let b = load_traces(&via_csi).unwrap();
    assert_eq!(a.len(), 1);
    assert_eq!(a[0].truth.len(), 2);
    assert!(!a[0].segments.is_empty());
    assert_eq!(a, b, "the CSI files round-trip exactly");
}

#[test]
fn test_train_replay_resume_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sifall.toml");
    std::fs::write(
        &config,
        "train_traces = 1\nepochs = 1\nlatent = 4\nwidths = [4, 8]\nfsync = false\nretrain_steps = 2\n",
    )
    .unwrap();
    let data = dir.path().join("data");
    let segments = dir.path().join("segments.jsonl");
    let c = p(&config);
    sifall(&["simulate", "--config", c, "--out", p(&dir.path().join("sim")), "--traces", "2", "--no-csi", "--segments", p(&segments)]);
    let out = sifall(&["train", "--config", c, "--data-dir", p(&data)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("alpha"));

    let again = Command::new(env!("CARGO_BIN_EXE_sifall"))
        .args(["train", "--config", c, "--data-dir", p(&data)])
        .output()
        .unwrap();
    assert!(!again.status.success(), "training refuses an initialised directory");

    let total: usize = load_traces(&segments).unwrap().iter().map(|t| t.segments.len()).sum();
    let report_dir = dir.path().join("report");
    sifall(&["replay", "--segments", p(&segments), "--data-dir", p(&data), "--limit", "3"]);
    sifall(&["replay", "--segments", p(&segments), "--data-dir", p(&data), "--out", p(&report_dir)]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["decisions"], total);
    assert_eq!(report["falls"], 6);

    let eval = sifall(&[
        "eval",
        "--detections",
        p(&report_dir.join("detections.jsonl")),
        "--segments",
        p(&segments),
    ]);
    let offline: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(offline["tpr"], report["tpr"]);
    assert_eq!(offline["fpr"], report["fpr"]);
}

#[test]
fn test_missing_data_dir_is_an_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_sifall"))
        .args(["replay", "--segments", "nowhere.jsonl"])
        .env_remove(sifall_gateway::DATA_DIR_ENV)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("data directory"));
}
