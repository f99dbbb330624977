//! Command-line front end: corpus simulation, front-end segmentation,
//! pretraining, the HTTP service, replay and offline evaluation.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use sifall_core::augment::AugmentPlan;
use sifall_core::corpus::{segment_trace, sequence_scenario};
use sifall_core::eval::evaluate;
use sifall_core::pretrain::{benign_set, held_out_scores, pretrain, PretrainError};
use sifall_core::sim::trace_io::{read_trace, read_truth, write_trace, write_truth, TraceIoError};
use sifall_core::sim::generate_trace;
use sifall_core::sim::SimError;
use sifall_core::{Detection, MotionKind};
use sifall_gateway::replay::{load_traces, save_traces, truth_of, ReplayTrace};
use sifall_gateway::{
    replay, router, spawn_writer, DataDir, Engine, GatewayError, ReplayOptions, RetrainMode, Settings,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    TraceIo(#[from] TraceIoError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("no data directory: pass --data-dir or set {}", sifall_gateway::DATA_DIR_ENV)]
    NoDataDir,
    #[error("{0}")]
    Usage(String),
}

#[derive(Debug, Parser)]
#[command(name = "sifall", version, about = "RF fall detection from WiFi channel state information")]
pub struct Cli {
    /// Settings file (TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate CSI traces with ground truth.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        traces: usize,
        /// Activities per trace, comma separated (e.g. Walk,Sit,WalkFall).
        #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
        kinds: Vec<MotionKind>,
        /// Also segment the traces into this replay file.
        #[arg(long)]
        segments: Option<PathBuf>,
        /// Skip writing the CSI frames.
        #[arg(long)]
        no_csi: bool,
    },
    /// Segment simulated or recorded CSI traces.
    Frontend {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the model on simulated benign activity and initialise a data directory.
    Train {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Held-out traces per class for an AUC report; 0 skips it.
        #[arg(long, default_value_t = 0)]
        holdout: usize,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        listen: Option<String>,
    },
    /// Stream a segment file through the detector, resuming if interrupted.
    Replay {
        #[arg(long)]
        segments: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Stop after this many new segments.
        #[arg(long)]
        limit: Option<usize>,
        /// Directory for report.json and detections.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Leave alarms open instead of answering them from ground truth.
        #[arg(long)]
        no_verdicts: bool,
    },
    /// Score detections against the ground truth of a segment file.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        segments: PathBuf,
        #[arg(long)]
        window: Option<f64>,
    },
}

fn parse_kind(s: &str) -> Result<MotionKind, String> {
    serde_json::from_value(serde_json::Value::String(s.trim().to_string()))
        .map_err(|_| format!("unknown activity {s:?}"))
}

/// Activities of the default mixed trace `i`: every activity once, rotated.
pub fn mixed_kinds(i: usize) -> Vec<MotionKind> {
    use MotionKind::*;
    let mut k = vec![Walk, Sit, WalkFall, Squat, Swing, Jump, StopFall, Bow, SlowFall];
    let n = k.len();
    k.rotate_left(i % n);
    k
}

fn trace_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(900_000 + i as u64)
}

/// Simulated traces `0..n` with ids `trace-000` ..., segment ids unique across traces.
pub fn simulate_replay_traces(n: usize, seed: u64, kinds: &[MotionKind]) -> Result<Vec<ReplayTrace>, CliError> {
    let mut out = Vec::with_capacity(n);
    let mut next_id = 1;
    for i in 0..n {
        let k = if kinds.is_empty() { mixed_kinds(i) } else { kinds.to_vec() };
        let t = ReplayTrace::simulate(&sequence_scenario(&k, trace_seed(seed, i)), &trace_name(i), next_id)?;
        next_id += t.segments.len() as u64;
        out.push(t);
    }
    Ok(out)
}

fn trace_name(i: usize) -> String {
    format!("trace-{i:03}")
}

pub fn load_settings(cli: &Cli) -> Result<Settings, CliError> {
    let mut s = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    if let Some(seed) = cli.seed {
        s.seed = seed;
    }
    Ok(s)
}

fn data_dir(arg: &Option<PathBuf>) -> Result<DataDir, CliError> {
    arg.clone().map(DataDir::new).or_else(DataDir::from_env).ok_or(CliError::NoDataDir)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let settings = load_settings(&cli)?;
    match cli.command {
        Command::Simulate {
            out,
            traces,
            kinds,
            segments,
            no_csi,
        } => simulate(&out, traces, &kinds, settings.seed, segments.as_deref(), no_csi),
        Command::Frontend { corpus, out } => frontend(&corpus, &out),
        Command::Train { data_dir: d, holdout } => train(&data_dir(&d)?, &settings, holdout),
        Command::Serve { data_dir: d, listen } => serve(data_dir(&d)?, listen.unwrap_or(settings.listen)),
        Command::Replay {
            segments,
            data_dir: d,
            limit,
            out,
            no_verdicts,
        } => replay_cmd(&segments, data_dir(&d)?, limit, out.as_deref(), !no_verdicts),
        Command::Eval {
            detections,
            segments,
            window,
        } => eval_cmd(&detections, &segments, window.unwrap_or(settings.window_s)),
    }
}

fn simulate(
    out: &Path,
    traces: usize,
    kinds: &[MotionKind],
    seed: u64,
    segments: Option<&Path>,
    no_csi: bool,
) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    let mut replay_traces = Vec::new();
    let mut next_id = 1;
    for i in 0..traces {
        let k = if kinds.is_empty() { mixed_kinds(i) } else { kinds.to_vec() };
        let sc = sequence_scenario(&k, trace_seed(seed, i));
        let (trace, truth) = generate_trace(&sc)?;
        let name = trace_name(i);
        if !no_csi {
            let mut w = BufWriter::new(File::create(out.join(format!("{name}.csi.jsonl")))?);
            write_trace(&mut w, &trace)?;
            w.flush()?;
        }
        write_truth(BufWriter::new(File::create(out.join(format!("{name}.truth.jsonl")))?), &truth)?;
        if segments.is_some() {
            let t = ReplayTrace::from_segmented(&segment_trace(trace, truth, &name)?, &name, next_id);
            next_id += t.segments.len() as u64;
            replay_traces.push(t);
        }
        tracing::info!("{name}: {} events", k.len());
    }
    if let Some(p) = segments {
        save_traces(p, &replay_traces)?;
    }
    Ok(())
}

fn frontend(corpus: &Path, out: &Path) -> Result<(), CliError> {
    let mut names: Vec<String> = std::fs::read_dir(corpus)?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter_map(|n| n.strip_suffix(".csi.jsonl").map(str::to_string))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::Usage(format!("no *.csi.jsonl traces in {}", corpus.display())));
    }
    let mut traces = Vec::with_capacity(names.len());
    let mut next_id = 1;
    for name in names {
        let trace = read_trace(BufReader::new(File::open(corpus.join(format!("{name}.csi.jsonl")))?))?;
        let truth_path = corpus.join(format!("{name}.truth.jsonl"));
        let truth = if truth_path.exists() {
            read_truth(BufReader::new(File::open(truth_path)?))?
        } else {
            Vec::new()
        };
        let t = ReplayTrace::from_segmented(&segment_trace(trace, truth, &name)?, &name, next_id);
        tracing::info!("{name}: {} segments", t.segments.len());
        next_id += t.segments.len() as u64;
        traces.push(t);
    }
    save_traces(out, &traces)?;
    Ok(())
}

fn train(dir: &DataDir, settings: &Settings, holdout: usize) -> Result<(), CliError> {
    if dir.is_initialised() {
        return Err(CliError::Usage(format!("{} is already initialised", dir.root().display())));
    }
    let set = benign_set(settings.train_traces, settings.seed, &AugmentPlan::default())?;
    let (c, f, _) = set.augmented[0].dims();
    tracing::info!("{} segments, {} training tensors", set.segments.len(), set.augmented.len());
    let trained = pretrain(&set, settings.net_config(c, f), &settings.train_config(), &settings.thresholds(), |r| {
        tracing::info!("epoch {} loss {:.4} recon {:.4}", r.epoch, r.mean_loss, r.mean_recon)
    })?;
    if holdout > 0 {
        let h = held_out_scores(&trained.net, holdout, settings.seed)?;
        println!("held-out auc {:.4} ({} falls, {} benign)", h.auc(), h.falls.len(), h.benign.len());
    }
    dir.initialise(&trained.net, &trained.state, settings)?;
    println!("alpha {:.6} gamma {:.6}", trained.state.alpha, trained.state.gamma_med);
    Ok(())
}

fn serve(dir: DataDir, listen: String) -> Result<(), CliError> {
    let engine = Engine::open(dir, RetrainMode::Background)?;
    let depth = engine.settings().queue_depth;
    let rt = tokio::runtime::Runtime::new()?;
    let (state, writer) = spawn_writer(engine, depth);
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&listen).await?;
        tracing::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    drop(writer.join());
    Ok(())
}

fn replay_cmd(segments: &Path, dir: DataDir, limit: Option<usize>, out: Option<&Path>, auto_verdict: bool) -> Result<(), CliError> {
    let traces = load_traces(segments)?;
    let mut engine = Engine::open(dir, RetrainMode::Inline)?;
    let opts = ReplayOptions {
        auto_verdict,
        window_s: engine.settings().window_s,
        limit,
    };
    let outcome = replay(&mut engine, &traces, &opts)?;
    tracing::info!("ingested {}, resumed {}", outcome.ingested, outcome.resumed);
    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&outcome.report)?)?;
        let mut w = BufWriter::new(File::create(out.join("detections.jsonl"))?);
        for d in &outcome.detections {
            serde_json::to_writer(&mut w, d)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    let r = &outcome.report;
    println!(
        "{} decisions, tpr {:.3}, fpr {:.3}, complete {}",
        r.decisions, r.tpr, r.fpr, outcome.complete
    );
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>, CliError> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn eval_cmd(detections: &Path, segments: &Path, window_s: f64) -> Result<(), CliError> {
    let truth = truth_of(&load_traces(segments)?);
    let report = evaluate(&read_detections(detections)?, &truth, window_s);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_kind_names_parse() {
        assert_eq!(parse_kind("WalkFall").unwrap(), MotionKind::WalkFall);
        assert_eq!(parse_kind(" Sit").unwrap(), MotionKind::Sit);
        assert!(parse_kind("Cartwheel").is_err());
    }

    #[test]
    fn test_mixed_kinds_rotate_through_every_activity() {
        let a = mixed_kinds(0);
        let b = mixed_kinds(1);
        assert_eq!(a.len(), b.len());
        assert_eq!(a[1], b[0]);
        assert!(MotionKind::FALLS.iter().all(|k| a.contains(k)));
    }

    #[test]
    fn test_cli_parses_global_flags_after_subcommand() {
        let cli = Cli::try_parse_from(["sifall", "replay", "--segments", "s.jsonl", "--seed", "7"]).unwrap();
        assert_eq!(cli.seed, Some(7));
        assert!(matches!(cli.command, Command::Replay { limit: None, .. }));
        assert!(Cli::try_parse_from(["sifall", "simulate", "--out", "x", "--kinds", "Sit,Nope"]).is_err());
    }
}
