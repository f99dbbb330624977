//! The single-writer engine: detector, event log, model files and retraining.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sifall_core::eval::LatencyStats;
use sifall_core::fallnet::{decode_checkpoint, encode_checkpoint, FallNet, Tensor3};
use sifall_core::online::{AlarmStatus, RetrainJob};
use sifall_core::{AlarmRecord, Decision, Detector, DetectorState, Retrainer, Verdict};

use crate::envelope::SegmentEnvelope;
use crate::log::{DecisionEntry, EventLog, LogEntry, StoredEnvelope};
use crate::settings::Settings;
use crate::{GatewayError, DATA_DIR_ENV};

/// Latency samples kept for the live metrics.
const LATENCY_WINDOW: usize = 1000;

/// Layout of the persistence root.
#[derive(Debug, Clone)]
pub struct DataDir {
    root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// The directory named by `SIFALL_DATA_DIR`.
    pub fn from_env() -> Option<Self> {
        std::env::var_os(DATA_DIR_ENV).map(|p| Self::new(PathBuf::from(p)))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn base_model(&self) -> PathBuf {
        self.root.join("base/model.sfc")
    }

    pub fn base_state(&self) -> PathBuf {
        self.root.join("base/state.json")
    }

    pub fn settings(&self) -> PathBuf {
        self.root.join("base/settings.toml")
    }

    pub fn events(&self) -> PathBuf {
        self.root.join("events.jsonl")
    }

    pub fn model(&self, version: u64) -> PathBuf {
        self.root.join(format!("models/v{version:08}.sfc"))
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn is_initialised(&self) -> bool {
        self.base_model().is_file() && self.base_state().is_file() && self.settings().is_file()
    }

    /// Writes the pretrained model, its initial state and the settings.
    pub fn initialise(&self, net: &FallNet<f32>, state: &DetectorState, settings: &Settings) -> Result<(), GatewayError> {
        std::fs::create_dir_all(self.root.join("base"))?;
        std::fs::create_dir_all(self.root.join("models"))?;
        write_atomic(&self.base_model(), &encode_checkpoint(net))?;
        write_atomic(&self.base_state(), serde_json::to_string_pretty(state)?.as_bytes())?;
        write_atomic(&self.settings(), settings.to_text().as_bytes())?;
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), GatewayError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::File::open(&tmp)?.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrainMode {
    /// Jobs run on the writer thread before the next command; fully
    /// deterministic.
    Inline,
    /// Jobs run on a worker thread; finished models are installed between
    /// commands.
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IngestReply {
    pub segment_id: u64,
    pub decision: Decision,
    pub e: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub model_version: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alarm: Option<AlarmRecord>,
    pub flushed: bool,
    pub inference_ms: f64,
    pub update_ms: f64,
}

/// Per-segment summary kept for evaluation and metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionSummary {
    pub segment_id: u64,
    pub trace_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub decision: Decision,
    pub e: f64,
    pub alarm_id: Option<u64>,
    pub model_version: u64,
    pub inference_ms: f64,
    pub update_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelStats {
    pub alpha: f64,
    pub gamma: f64,
    pub model_version: u64,
    pub buffer_fill: usize,
    pub buffer_capacity: usize,
    pub env_change_flag: bool,
    pub pending_retrains: usize,
    pub quarantined: usize,
    pub flushes: u64,
    /// False-positive share of the most recent verdicts.
    pub rolling_fpr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DecisionCounts {
    pub fall: u64,
    pub suspicious: u64,
    pub normal: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AlarmCounts {
    pub open: u64,
    pub confirmed_fall: u64,
    pub false_positive: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Metrics {
    pub segments: u64,
    pub decisions: DecisionCounts,
    pub alarms: AlarmCounts,
    pub retrains_installed: u64,
    pub flushes: u64,
    pub rolling_fpr: Option<f64>,
    pub inference_ms: LatencyStats,
    pub update_ms: LatencyStats,
    /// Requests refused with 503 because the queue was full.
    pub rejected: u64,
}

/// Read-only view published after every mutation.
#[derive(Clone)]
pub struct Snapshot {
    pub stats: ModelStats,
    pub metrics: Metrics,
    /// Newest first.
    pub alarms: Vec<AlarmRecord>,
    pub model: Arc<FallNet<f32>>,
    pub alarm_tensors: BTreeMap<u64, Arc<Tensor3<f32>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CheckpointInfo {
    pub model_version: u64,
    pub path: PathBuf,
}

type Finished = Result<(Arc<FallNet<f32>>, u64), String>;

enum Retrain {
    Inline(Retrainer),
    Background {
        jobs: Option<mpsc::Sender<RetrainJob>>,
        done: mpsc::Receiver<Finished>,
        worker: Option<JoinHandle<()>>,
    },
}

pub struct Engine {
    dir: DataDir,
    settings: Settings,
    detector: Detector,
    log: EventLog,
    retrain: Retrain,
    /// Issued jobs whose model is not installed yet, in issue order.
    pending: VecDeque<RetrainJob>,
    seen: HashSet<(String, u64)>,
    decisions: Vec<DecisionSummary>,
    alarm_tensors: BTreeMap<u64, Arc<Tensor3<f32>>>,
    verdicts: VecDeque<Verdict>,
    counts: DecisionCounts,
    installs: u64,
    inference_ms: VecDeque<f64>,
    update_ms: VecDeque<f64>,
    poisoned: Option<String>,
}

fn push_window(q: &mut VecDeque<f64>, v: f64) {
    q.push_back(v);
    if q.len() > LATENCY_WINDOW {
        q.pop_front();
    }
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl Engine {
    /// Opens an initialised data directory and folds its event log.
    pub fn open(dir: DataDir, mode: RetrainMode) -> Result<Self, GatewayError> {
        if !dir.is_initialised() {
            return Err(GatewayError::NotInitialised(dir.root().to_path_buf()));
        }
        let settings = Settings::load(&dir.settings())?;
        let base: FallNet<f32> = decode_checkpoint(&std::fs::read(dir.base_model())?)?;
        let state: DetectorState = serde_json::from_slice(&std::fs::read(dir.base_state())?)?;
        let base_version = state.model_version;
        std::fs::create_dir_all(dir.root().join("models"))?;
        let (log, entries) = EventLog::open(&dir.events(), settings.fsync)?;

        let placeholder = Arc::new(base.clone());
        let mut engine = Self {
            detector: Detector::new(base.clone(), state, settings.online_config()),
            retrain: Retrain::Inline(Retrainer::new(base.clone(), base_version, &settings.online_config())),
            dir,
            settings,
            log,
            pending: VecDeque::new(),
            seen: HashSet::new(),
            decisions: Vec::new(),
            alarm_tensors: BTreeMap::new(),
            verdicts: VecDeque::new(),
            counts: DecisionCounts::default(),
            installs: 0,
            inference_ms: VecDeque::new(),
            update_ms: VecDeque::new(),
            poisoned: None,
        };
        for (n, entry) in entries.into_iter().enumerate() {
            engine
                .fold(entry, &placeholder)
                .map_err(|e| GatewayError::Corrupt(format!("entry {}: {e}", n + 1)))?;
        }

        let version = engine.detector.state().model_version;
        let net = if version == base_version {
            base
        } else {
            decode_checkpoint(&std::fs::read(engine.dir.model(version))?)?
        };
        engine.detector.install_model(Arc::new(net.clone()), version);
        let retrainer = Retrainer::new(net, version, engine.detector.config());
        engine.retrain = match mode {
            RetrainMode::Inline => Retrain::Inline(retrainer),
            RetrainMode::Background => spawn_worker(retrainer, engine.dir.clone()),
        };
        let pending: Vec<RetrainJob> = engine.pending.drain(..).collect();
        engine.submit(pending)?;
        Ok(engine)
    }

    fn fold(&mut self, entry: LogEntry, placeholder: &Arc<FallNet<f32>>) -> Result<(), GatewayError> {
        match entry {
            LogEntry::Decision(d) => {
                let env = d.envelope.decode()?;
                if d.model_version != self.detector.state().model_version {
                    return Err(GatewayError::Corrupt(format!(
                        "segment {} scored by v{}, replay is at v{}",
                        d.segment_id,
                        d.model_version,
                        self.detector.state().model_version
                    )));
                }
                let out = self.detector.ingest_scored(env.to_sample(), d.e, d.mu.clone())?;
                if out.decision != d.decision || out.record.alpha.to_bits() != d.alpha.to_bits() {
                    return Err(GatewayError::Corrupt(format!(
                        "segment {} replays as {:?} α={} but was logged {:?} α={}",
                        d.segment_id, out.decision, out.record.alpha, d.decision, d.alpha
                    )));
                }
                self.absorb(&env, &d, out.alarm.is_some());
                self.pending.extend(out.jobs);
            }
            LogEntry::Verdict { alarm_id, verdict } => {
                let (_, job) = self.detector.apply_verdict(alarm_id, verdict)?;
                self.note_verdict(verdict);
                self.pending.extend(job);
            }
            LogEntry::Install { version } => {
                self.take_installed(version)?;
                self.detector.install_model(Arc::clone(placeholder), version);
            }
        }
        Ok(())
    }

    /// Pops the job that produced `version`.
    fn take_installed(&mut self, version: u64) -> Result<(), GatewayError> {
        let expect = self.detector.state().model_version + 1;
        if version != expect || self.pending.pop_front().is_none() {
            return Err(GatewayError::Corrupt(format!(
                "install of v{version} does not follow a pending job (expected v{expect})"
            )));
        }
        self.installs += 1;
        Ok(())
    }

    fn absorb(&mut self, env: &SegmentEnvelope, d: &DecisionEntry, alarmed: bool) {
        self.seen.insert((env.trace_id.clone(), env.segment_id));
        match d.decision {
            Decision::Fall => self.counts.fall += 1,
            Decision::Suspicious => self.counts.suspicious += 1,
            Decision::Normal => self.counts.normal += 1,
        }
        if let (true, Some(id)) = (alarmed, d.alarm_id) {
            self.alarm_tensors.insert(id, Arc::new(env.tensor.clone()));
        }
        push_window(&mut self.inference_ms, d.inference_ms);
        push_window(&mut self.update_ms, d.update_ms);
        self.decisions.push(DecisionSummary {
            segment_id: env.segment_id,
            trace_id: env.trace_id.clone(),
            t_start: env.t_start,
            t_end: env.t_end,
            decision: d.decision,
            e: d.e,
            alarm_id: d.alarm_id,
            model_version: d.model_version,
            inference_ms: d.inference_ms,
            update_ms: d.update_ms,
        });
    }

    fn note_verdict(&mut self, v: Verdict) {
        self.verdicts.push_back(v);
        while self.verdicts.len() > self.settings.rolling_verdicts.max(1) {
            self.verdicts.pop_front();
        }
    }

    fn check_live(&self) -> Result<(), GatewayError> {
        match &self.poisoned {
            Some(why) => Err(GatewayError::Poisoned(why.clone())),
            None => Ok(()),
        }
    }

    /// Appends to the log; on failure the engine refuses further writes,
    /// since its memory is now ahead of the log.
    fn append(&mut self, entry: &LogEntry) -> Result<(), GatewayError> {
        self.log.append(entry).inspect_err(|e| {
            self.poisoned = Some(e.to_string());
        })
    }

    /// Hands jobs to the retrainer. Inline jobs finish and install here.
    fn submit(&mut self, jobs: Vec<RetrainJob>) -> Result<(), GatewayError> {
        for job in jobs {
            match &mut self.retrain {
                Retrain::Inline(r) => {
                    let (net, version) = r.run(&job)?;
                    write_atomic(&self.dir.model(version), &encode_checkpoint(&*net))?;
                    self.pending.push_back(job);
                    self.install(net, version)?;
                }
                Retrain::Background { jobs: Some(tx), .. } => {
                    tx.send(job.clone()).map_err(|_| GatewayError::Shutdown)?;
                    self.pending.push_back(job);
                }
                Retrain::Background { jobs: None, .. } => return Err(GatewayError::Shutdown),
            }
        }
        Ok(())
    }

    fn install(&mut self, net: Arc<FallNet<f32>>, version: u64) -> Result<(), GatewayError> {
        self.append(&LogEntry::Install { version })?;
        self.take_installed(version)?;
        self.detector.install_model(net, version);
        self.prune_models(version);
        Ok(())
    }

    fn prune_models(&self, installed: u64) {
        let keep = self.settings.keep_models.max(1) as u64;
        if installed >= keep {
            let _ = std::fs::remove_file(self.dir.model(installed - keep));
        }
    }

    /// Installs models the background worker has finished. Returns how many.
    pub fn poll(&mut self) -> Result<usize, GatewayError> {
        self.check_live()?;
        let mut finished = Vec::new();
        if let Retrain::Background { done, .. } = &self.retrain {
            while let Ok(f) = done.try_recv() {
                finished.push(f);
            }
        }
        let n = finished.len();
        for f in finished {
            let (net, version) = f.map_err(|e| {
                self.poisoned = Some(e.clone());
                GatewayError::Poisoned(e)
            })?;
            self.install(net, version)?;
        }
        Ok(n)
    }

    /// Blocks until every issued job is installed.
    pub fn wait_idle(&mut self) -> Result<(), GatewayError> {
        while !self.pending.is_empty() {
            let Retrain::Background { done, .. } = &self.retrain else {
                break;
            };
            let f = done.recv().map_err(|_| GatewayError::Shutdown)?;
            let (net, version) = f.map_err(GatewayError::Poisoned)?;
            self.install(net, version)?;
        }
        Ok(())
    }

    /// Scores, classifies and logs one segment.
    pub fn ingest(&mut self, env: SegmentEnvelope) -> Result<IngestReply, GatewayError> {
        self.poll()?;
        let cfg = self.detector.model().config().clone();
        env.check_shape(cfg.channels, cfg.freq_bins)?;
        if self.seen.contains(&(env.trace_id.clone(), env.segment_id)) {
            return Err(GatewayError::Duplicate {
                trace_id: env.trace_id,
                segment_id: env.segment_id,
            });
        }
        let model = self.detector.model();
        let t0 = Instant::now();
        let (e, mu) = model.score(&env.tensor)?;
        let inference_ms = elapsed_ms(t0);
        let t1 = Instant::now();
        let out = self.detector.ingest_scored(env.to_sample(), e, mu.clone())?;
        let update_ms = elapsed_ms(t1);
        let entry = DecisionEntry {
            t: out.record.t,
            e,
            alpha: out.record.alpha,
            decision: out.decision,
            model_version: out.record.model_version,
            gamma: out.record.gamma,
            segment_id: env.segment_id,
            trace_id: env.trace_id.clone(),
            alarm_id: out.record.alarm_id,
            inference_ms,
            update_ms,
            mu,
            envelope: StoredEnvelope::of(&env),
        };
        self.append(&LogEntry::Decision(entry.clone()))?;
        self.absorb(&env, &entry, out.alarm.is_some());
        let reply = IngestReply {
            segment_id: env.segment_id,
            decision: out.decision,
            e,
            alpha: out.record.alpha,
            gamma: out.record.gamma,
            model_version: out.record.model_version,
            alarm: out.alarm,
            flushed: out.flush.is_some(),
            inference_ms,
            update_ms,
        };
        self.submit(out.jobs)?;
        Ok(reply)
    }

    /// Closes an open alarm. A second verdict on the same alarm is a conflict.
    pub fn verdict(&mut self, alarm_id: u64, verdict: Verdict) -> Result<AlarmRecord, GatewayError> {
        self.poll()?;
        let (rec, job) = self.detector.apply_verdict(alarm_id, verdict)?;
        self.append(&LogEntry::Verdict { alarm_id, verdict })?;
        self.note_verdict(verdict);
        self.submit(job.into_iter().collect())?;
        Ok(rec)
    }

    /// Saves the published model under `checkpoints/`.
    pub fn checkpoint(&self) -> Result<CheckpointInfo, GatewayError> {
        let version = self.detector.state().model_version;
        let path = self.dir.checkpoints().join(format!("model-v{version:08}.sfc"));
        write_atomic(&path, &encode_checkpoint(&*self.detector.model()))?;
        Ok(CheckpointInfo {
            model_version: version,
            path,
        })
    }

    pub fn settings(&self) -> &Settings {
        &self.settings
    }

    pub fn data_dir(&self) -> &DataDir {
        &self.dir
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    pub fn decisions(&self) -> &[DecisionSummary] {
        &self.decisions
    }

    pub fn has_segment(&self, trace_id: &str, segment_id: u64) -> bool {
        self.seen.contains(&(trace_id.to_string(), segment_id))
    }

    pub fn alarm(&self, id: u64) -> Option<&AlarmRecord> {
        self.detector.alarm(id)
    }

    pub fn pending_jobs(&self) -> usize {
        self.pending.len()
    }

    fn rolling_fpr(&self) -> Option<f64> {
        let n = self.verdicts.len();
        (n > 0).then(|| self.verdicts.iter().filter(|v| **v == Verdict::FalsePositive).count() as f64 / n as f64)
    }

    pub fn stats(&self) -> ModelStats {
        let s = self.detector.state();
        ModelStats {
            alpha: s.alpha,
            gamma: s.gamma_med,
            model_version: s.model_version,
            buffer_fill: self.detector.buffer_len(),
            buffer_capacity: self.detector.config().buffer_capacity,
            env_change_flag: s.env_change_flag,
            pending_retrains: self.pending.len(),
            quarantined: self.detector.quarantine().len(),
            flushes: self.detector.flush_count(),
            rolling_fpr: self.rolling_fpr(),
        }
    }

    pub fn metrics(&self) -> Metrics {
        let mut alarms = AlarmCounts::default();
        for a in self.detector.alarms() {
            match a.status {
                AlarmStatus::Open => alarms.open += 1,
                AlarmStatus::ConfirmedFall => alarms.confirmed_fall += 1,
                AlarmStatus::FalsePositive => alarms.false_positive += 1,
            }
        }
        let v = |q: &VecDeque<f64>| LatencyStats::of(&q.iter().copied().collect::<Vec<_>>());
        Metrics {
            segments: self.decisions.len() as u64,
            decisions: self.counts.clone(),
            alarms,
            retrains_installed: self.installs,
            flushes: self.detector.flush_count(),
            rolling_fpr: self.rolling_fpr(),
            inference_ms: v(&self.inference_ms),
            update_ms: v(&self.update_ms),
            rejected: 0,
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        let mut alarms: Vec<AlarmRecord> = self.detector.alarms().cloned().collect();
        alarms.reverse();
        Snapshot {
            stats: self.stats(),
            metrics: self.metrics(),
            alarms,
            model: self.detector.model(),
            alarm_tensors: self.alarm_tensors.clone(),
        }
    }

    /// Stops the background worker after its current job.
    pub fn shutdown(&mut self) {
        if let Retrain::Background { jobs, worker, .. } = &mut self.retrain {
            jobs.take();
            if let Some(h) = worker.take() {
                let _ = h.join();
            }
        }
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn spawn_worker(mut retrainer: Retrainer, dir: DataDir) -> Retrain {
    let (job_tx, job_rx) = mpsc::channel::<RetrainJob>();
    let (done_tx, done_rx) = mpsc::channel::<Finished>();
    let worker = std::thread::Builder::new()
        .name("sifall-retrain".into())
        .spawn(move || {
            for job in job_rx {
                let res = retrainer
                    .run(&job)
                    .map_err(|e| e.to_string())
                    .and_then(|(net, v)| {
                        write_atomic(&dir.model(v), &encode_checkpoint(&*net))
                            .map(|_| (net, v))
                            .map_err(|e| e.to_string())
                    });
                let failed = res.is_err();
                if done_tx.send(res).is_err() || failed {
                    break;
                }
            }
        })
        .expect("spawn retrain worker");
    Retrain::Background {
        jobs: Some(job_tx),
        done: done_rx,
        worker: Some(worker),
    }
}
