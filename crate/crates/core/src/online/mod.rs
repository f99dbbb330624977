//! Self-updating detection loop.
//!
//! [`Detector`] owns the thresholds, the suspicious buffer, the quarantine
//! store and the alarm ledger, and turns every scored segment into a
//! [`Decision`]. Retraining requests leave it as [`RetrainJob`]s; a
//! [`Retrainer`] replays them in order on its own copy of the network and the
//! resulting models are installed back with [`Detector::install_model`].

pub mod cluster;
pub mod state;

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment_24x, augment_shifts_only, AugmentError, AugmentPlan};
use crate::dsp::{DynamicsSeries, SpectroSegment, Stft, StftConfig};
use crate::fallnet::{retrain, FallNet, FallNetError, Tensor3};

pub use cluster::{cluster_latents, mean_shift, pca_reduce, ClusterReport, MeanShiftConfig};
pub use state::{classify, decide, update_stats, Decision, DetectorState, ThresholdConfig};

#[derive(Debug, Error)]
pub enum OnlineError {
    #[error("detector state is not initialised")]
    Uninitialized,
    #[error("reconstruction errors must be finite and non-negative")]
    BadErrors,
    #[error("unknown alarm {0}")]
    UnknownAlarm(u64),
    #[error("alarm {0} is already closed")]
    AlarmClosed(u64),
    #[error(transparent)]
    Model(#[from] FallNetError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

/// A scored unit: one segment tensor plus, when available, its `S(t)` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub trace_id: String,
    pub t_start: f64,
    pub t_end: f64,
    /// `C × F × T`.
    pub tensor: Tensor3<f32>,
    pub dynamics: Option<DynamicsSeries>,
}

impl Sample {
    pub fn from_segment(id: u64, seg: &SpectroSegment, dynamics: Option<DynamicsSeries>) -> Self {
        Self {
            id,
            trace_id: seg.source_trace.clone(),
            t_start: seg.t_start,
            t_end: seg.t_end,
            tensor: Tensor3::from_segment(seg).cast(),
            dynamics,
        }
    }

    /// The 24 augmented tensors; noise levels need the `S(t)` samples, without
    /// them only the shift schedule is applied.
    pub fn augmented(&self, plan: &AugmentPlan, seed: u64) -> Result<Vec<Tensor3<f32>>, OnlineError> {
        let segs = match &self.dynamics {
            Some(d) => augment_24x(d, plan, &Stft::new(StftConfig::SEGMENT), seed)?,
            None => augment_shifts_only(&self.tensor.cast::<f64>().to_segment(), plan, &StftConfig::SEGMENT, seed)?,
        };
        Ok(segs.iter().map(|s| Tensor3::from_segment(s).cast()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlarmStatus {
    Open,
    ConfirmedFall,
    FalsePositive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    TruePositive,
    FalsePositive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmRecord {
    pub id: u64,
    /// Stream time of the segment end.
    pub timestamp: f64,
    pub segment_id: u64,
    pub trace_id: String,
    pub e: f64,
    pub status: AlarmStatus,
    pub model_version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainReason {
    Normal,
    Cluster,
    FalsePositive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainJob {
    pub job_id: u64,
    pub reason: RetrainReason,
    pub sample: Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub sample: Sample,
    pub mu: Vec<f64>,
    pub e: f64,
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t: f64,
    pub segment_id: u64,
    pub trace_id: String,
    pub e: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub decision: Decision,
    pub model_version: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alarm_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlushReport {
    pub clusters: ClusterReport,
    pub segment_ids: Vec<u64>,
    pub retrained: Option<u64>,
    pub quarantined: Vec<u64>,
}

/// Everything one ingest produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub decision: Decision,
    pub e: f64,
    pub alarm: Option<AlarmRecord>,
    pub jobs: Vec<RetrainJob>,
    pub flush: Option<FlushReport>,
    pub record: LogRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineConfig {
    pub thresholds: ThresholdConfig,
    pub buffer_capacity: usize,
    pub pca_dims: usize,
    pub far_factor: f64,
    pub quarantine_cap: usize,
    pub mean_shift: MeanShiftConfig,
    pub retrain_steps: usize,
    pub retrain_lr: f64,
    pub augment: AugmentPlan,
    /// Whether a Normal decision enqueues a retrain on its sample.
    pub retrain_on_normal: bool,
    pub seed: u64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            thresholds: ThresholdConfig::default(),
            buffer_capacity: 50,
            pca_dims: 8,
            far_factor: 3.0,
            quarantine_cap: 500,
            mean_shift: MeanShiftConfig::default(),
            retrain_steps: 10,
            retrain_lr: 1e-4,
            augment: AugmentPlan::default(),
            retrain_on_normal: true,
            seed: 0,
        }
    }
}

/// Single-writer decision state.
pub struct Detector {
    cfg: OnlineConfig,
    state: DetectorState,
    net: Arc<FallNet<f32>>,
    buffer: Vec<BufferEntry>,
    quarantine: VecDeque<BufferEntry>,
    alarms: BTreeMap<u64, AlarmRecord>,
    open_samples: BTreeMap<u64, Sample>,
    next_alarm: u64,
    next_job: u64,
    flushes: u64,
}

impl Detector {
    pub fn new(net: FallNet<f32>, state: DetectorState, cfg: OnlineConfig) -> Self {
        Self {
            cfg,
            state,
            net: Arc::new(net),
            buffer: Vec::new(),
            quarantine: VecDeque::new(),
            alarms: BTreeMap::new(),
            open_samples: BTreeMap::new(),
            next_alarm: 1,
            next_job: 1,
            flushes: 0,
        }
    }

    pub fn config(&self) -> &OnlineConfig {
        &self.cfg
    }

    pub fn state(&self) -> &DetectorState {
        &self.state
    }

    /// The published inference model.
    pub fn model(&self) -> Arc<FallNet<f32>> {
        Arc::clone(&self.net)
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    pub fn quarantine(&self) -> &VecDeque<BufferEntry> {
        &self.quarantine
    }

    pub fn flush_count(&self) -> u64 {
        self.flushes
    }

    pub fn alarms(&self) -> impl Iterator<Item = &AlarmRecord> {
        self.alarms.values()
    }

    pub fn alarm(&self, id: u64) -> Option<&AlarmRecord> {
        self.alarms.get(&id)
    }

    /// Swaps in a retrained model.
    pub fn install_model(&mut self, net: Arc<FallNet<f32>>, version: u64) {
        self.net = net;
        self.state.model_version = version;
    }

    /// Scores and classifies one sample.
    pub fn ingest(&mut self, sample: Sample) -> Result<Outcome, OnlineError> {
        let (e, mu) = self.net.score(&sample.tensor)?;
        self.ingest_scored(sample, e, mu)
    }

    /// Classifies a sample already scored by the current model; `mu` is its
    /// latent mean. Replaying logged scores through this rebuilds the state.
    pub fn ingest_scored(&mut self, sample: Sample, e: f64, mu: Vec<f64>) -> Result<Outcome, OnlineError> {
        let decision = classify(e, &mut self.state, &self.cfg.thresholds)?;
        let mut jobs = Vec::new();
        let mut alarm = None;
        let mut flush = None;
        let record_base = (sample.t_end, sample.id, sample.trace_id.clone());
        match decision {
            Decision::Fall => {
                let rec = AlarmRecord {
                    id: self.next_alarm,
                    timestamp: sample.t_end,
                    segment_id: sample.id,
                    trace_id: sample.trace_id.clone(),
                    e,
                    status: AlarmStatus::Open,
                    model_version: self.state.model_version,
                };
                self.next_alarm += 1;
                self.alarms.insert(rec.id, rec.clone());
                self.open_samples.insert(rec.id, sample);
                alarm = Some(rec);
            }
            Decision::Suspicious => {
                self.buffer.push(BufferEntry { sample, mu, e });
                if self.buffer.len() >= self.cfg.buffer_capacity {
                    flush = Some(self.flush(&mut jobs));
                }
            }
            Decision::Normal => {
                if self.cfg.retrain_on_normal {
                    jobs.push(self.job(RetrainReason::Normal, sample));
                }
            }
        }
        let record = LogRecord {
            t: record_base.0,
            segment_id: record_base.1,
            trace_id: record_base.2,
            e,
            alpha: self.state.alpha,
            gamma: self.state.gamma_med,
            decision,
            model_version: self.state.model_version,
            alarm_id: alarm.as_ref().map(|a| a.id),
        };
        Ok(Outcome {
            decision,
            e,
            alarm,
            jobs,
            flush,
            record,
        })
    }

    fn job(&mut self, reason: RetrainReason, sample: Sample) -> RetrainJob {
        let job = RetrainJob {
            job_id: self.next_job,
            reason,
            sample,
        };
        self.next_job += 1;
        job
    }

    fn flush(&mut self, jobs: &mut Vec<RetrainJob>) -> FlushReport {
        self.flushes += 1;
        let entries = std::mem::take(&mut self.buffer);
        let latents: Vec<Vec<f64>> = entries.iter().map(|b| b.mu.clone()).collect();
        let reduced = pca_reduce(&latents, self.cfg.pca_dims);
        let mut clusters = cluster_latents(&latents, self.cfg.pca_dims, &self.cfg.mean_shift);
        clusters.far = cluster::far_clusters(&clusters.centroids, self.cfg.far_factor);
        let retrained = cluster::nearest_member(&reduced, &clusters, clusters.largest)
            .map(|i| entries[i].sample.clone());
        let retrained_id = retrained.as_ref().map(|s| s.id);
        if let Some(s) = retrained {
            jobs.push(self.job(RetrainReason::Cluster, s));
        }
        let mut quarantined = Vec::new();
        let segment_ids = entries.iter().map(|e| e.sample.id).collect();
        for (entry, &label) in entries.into_iter().zip(&clusters.labels) {
            if clusters.far.contains(&label) {
                quarantined.push(entry.sample.id);
                self.quarantine.push_back(entry);
                while self.quarantine.len() > self.cfg.quarantine_cap {
                    self.quarantine.pop_front();
                }
            }
        }
        FlushReport {
            clusters,
            segment_ids,
            retrained: retrained_id,
            quarantined,
        }
    }

    /// Closes an open alarm; a false positive enqueues its sample for retraining.
    pub fn apply_verdict(&mut self, alarm_id: u64, verdict: Verdict) -> Result<(AlarmRecord, Option<RetrainJob>), OnlineError> {
        let rec = self
            .alarms
            .get_mut(&alarm_id)
            .ok_or(OnlineError::UnknownAlarm(alarm_id))?;
        if rec.status != AlarmStatus::Open {
            return Err(OnlineError::AlarmClosed(alarm_id));
        }
        rec.status = match verdict {
            Verdict::TruePositive => AlarmStatus::ConfirmedFall,
            Verdict::FalsePositive => AlarmStatus::FalsePositive,
        };
        let rec = rec.clone();
        let sample = self.open_samples.remove(&alarm_id);
        let job = match (verdict, sample) {
            (Verdict::FalsePositive, Some(s)) => Some(self.job(RetrainReason::FalsePositive, s)),
            _ => None,
        };
        Ok((rec, job))
    }
}

/// Applies retrain jobs in order to its own copy of the network.
pub struct Retrainer {
    net: FallNet<f32>,
    version: u64,
    steps: usize,
    lr: f64,
    plan: AugmentPlan,
    seed: u64,
}

impl Retrainer {
    pub fn new(net: FallNet<f32>, version: u64, cfg: &OnlineConfig) -> Self {
        Self {
            net,
            version,
            steps: cfg.retrain_steps,
            lr: cfg.retrain_lr,
            plan: cfg.augment.clone(),
            seed: cfg.seed,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Trains on the job's 24 augmented tensors with a fresh Adam state and
    /// returns the new version.
    pub fn run(&mut self, job: &RetrainJob) -> Result<(Arc<FallNet<f32>>, u64), OnlineError> {
        let seed = self.seed ^ job.job_id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let batch = job.sample.augmented(&self.plan, seed)?;
        let mut next = self.net.clone();
        retrain(&mut next, &batch, self.steps, self.lr, seed)?;
        self.net = next;
        self.version += 1;
        Ok((Arc::new(self.net.clone()), self.version))
    }
}

/// Detector and retrainer run back to back: every job is trained and
/// installed before the next sample is scored.
pub struct SyncPipeline {
    pub detector: Detector,
    pub retrainer: Retrainer,
}

impl SyncPipeline {
    pub fn new(net: FallNet<f32>, state: DetectorState, cfg: OnlineConfig) -> Self {
        let retrainer = Retrainer::new(net.clone(), state.model_version, &cfg);
        Self {
            detector: Detector::new(net, state, cfg),
            retrainer,
        }
    }

    pub fn ingest(&mut self, sample: Sample) -> Result<Outcome, OnlineError> {
        let out = self.detector.ingest(sample)?;
        self.run_jobs(&out.jobs)?;
        Ok(out)
    }

    pub fn apply_verdict(&mut self, alarm_id: u64, verdict: Verdict) -> Result<AlarmRecord, OnlineError> {
        let (rec, job) = self.detector.apply_verdict(alarm_id, verdict)?;
        if let Some(j) = job {
            self.run_jobs(std::slice::from_ref(&j))?;
        }
        Ok(rec)
    }

    fn run_jobs(&mut self, jobs: &[RetrainJob]) -> Result<(), OnlineError> {
        for j in jobs {
            let (net, v) = self.retrainer.run(j)?;
            self.detector.install_model(net, v);
        }
        Ok(())
    }
}

/// α (mean) and γ (median) of the errors of a pretraining set.
pub fn initial_state(
    net: &FallNet<f32>,
    data: &[Tensor3<f32>],
    cfg: &ThresholdConfig,
) -> Result<DetectorState, OnlineError> {
    let errors = data
        .iter()
        .map(|x| net.reconstruction_error(x))
        .collect::<Result<Vec<_>, _>>()?;
    DetectorState::from_errors(&errors, cfg)
}
