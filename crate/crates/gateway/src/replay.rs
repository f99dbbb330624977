//! Dataset replay through an [`Engine`], resumable after a crash.
//!
//! Segments already in the engine's log are skipped, so rerunning the same
//! replay against a recovered data directory continues where it stopped.
//! With inline retraining the final report does not depend on where, or
//! whether, the run was interrupted.

use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sifall_core::corpus::{simulate_and_segment, Segmented};
use sifall_core::eval::{evaluate, matched_event};
use sifall_core::{
    AlarmStatus, ChannelScenario, Decision, Detection, Emitted, EvalReport, GroundTruthEvent, TruthEvent, Verdict,
};

use crate::engine::{DecisionSummary, Engine};
use crate::envelope::SegmentEnvelope;
use crate::log::StoredEnvelope;
use crate::GatewayError;

/// A front-end segment with the stream times needed for delay metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontSegment {
    pub envelope: SegmentEnvelope,
    /// Start of the pause that triggered segmentation.
    pub pause_t: f64,
    pub warned_at: f64,
    pub emitted_at: f64,
}

impl FrontSegment {
    pub fn from_emitted(id: u64, em: &Emitted) -> Self {
        Self {
            envelope: SegmentEnvelope::from_emitted(id, em),
            pause_t: em.bounds.t_end,
            warned_at: em.warned_at,
            emitted_at: em.at,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayTrace {
    pub trace_id: String,
    pub truth: Vec<GroundTruthEvent>,
    pub segments: Vec<FrontSegment>,
}

impl ReplayTrace {
    /// Simulates and segments `sc`; segment ids count up from `first_id`.
    pub fn simulate(sc: &ChannelScenario, trace_id: &str, first_id: u64) -> Result<Self, GatewayError> {
        let out = simulate_and_segment(sc, trace_id).map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Self::from_segmented(&out, trace_id, first_id))
    }

    pub fn from_segmented(out: &Segmented, trace_id: &str, first_id: u64) -> Self {
        Self {
            trace_id: trace_id.to_string(),
            truth: out.truth.clone(),
            segments: out
                .segments
                .iter()
                .enumerate()
                .map(|(i, em)| FrontSegment::from_emitted(first_id + i as u64, em))
                .collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct StoredSegment {
    envelope: StoredEnvelope,
    pause_t: f64,
    warned_at: f64,
    emitted_at: f64,
}

#[derive(Serialize, Deserialize)]
struct StoredTrace {
    trace_id: String,
    truth: Vec<GroundTruthEvent>,
    segments: Vec<StoredSegment>,
}

/// Writes one JSON line per trace.
pub fn save_traces(path: &Path, traces: &[ReplayTrace]) -> Result<(), GatewayError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for t in traces {
        let stored = StoredTrace {
            trace_id: t.trace_id.clone(),
            truth: t.truth.clone(),
            segments: t
                .segments
                .iter()
                .map(|s| StoredSegment {
                    envelope: StoredEnvelope::of(&s.envelope),
                    pause_t: s.pause_t,
                    warned_at: s.warned_at,
                    emitted_at: s.emitted_at,
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &stored)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_traces(path: &Path) -> Result<Vec<ReplayTrace>, GatewayError> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: StoredTrace = serde_json::from_str(&line)?;
        let segments = t
            .segments
            .into_iter()
            .map(|s| {
                Ok(FrontSegment {
                    envelope: s.envelope.decode()?,
                    pause_t: s.pause_t,
                    warned_at: s.warned_at,
                    emitted_at: s.emitted_at,
                })
            })
            .collect::<Result<_, GatewayError>>()?;
        out.push(ReplayTrace {
            trace_id: t.trace_id,
            truth: t.truth,
            segments,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayOptions {
    /// Answer every alarm with the ground-truth verdict.
    pub auto_verdict: bool,
    pub window_s: f64,
    /// Stop after ingesting this many new segments.
    pub limit: Option<usize>,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            auto_verdict: true,
            window_s: 1200.0,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    pub report: EvalReport,
    pub detections: Vec<Detection>,
    /// Segments ingested by this call.
    pub ingested: usize,
    /// Segments found already logged.
    pub resumed: usize,
    /// Whether every segment has a decision.
    pub complete: bool,
}

pub fn truth_of(traces: &[ReplayTrace]) -> Vec<TruthEvent> {
    traces
        .iter()
        .flat_map(|t| {
            t.truth.iter().map(|e| TruthEvent {
                trace_id: t.trace_id.clone(),
                event: e.clone(),
            })
        })
        .collect()
}

fn ground_truth_verdict(env: &SegmentEnvelope, truth: &[TruthEvent]) -> Verdict {
    match matched_event(&env.trace_id, env.t_start, env.t_end, truth) {
        Some(i) if truth[i].event.is_fall => Verdict::TruePositive,
        _ => Verdict::FalsePositive,
    }
}

pub fn replay(engine: &mut Engine, traces: &[ReplayTrace], opts: &ReplayOptions) -> Result<ReplayOutcome, GatewayError> {
    let truth = truth_of(traces);
    let (mut ingested, mut resumed) = (0, 0);
    'outer: for tr in traces {
        for seg in &tr.segments {
            let env = &seg.envelope;
            let alarm_id = if engine.has_segment(&env.trace_id, env.segment_id) {
                resumed += 1;
                engine
                    .decisions()
                    .iter()
                    .rev()
                    .find(|d| d.trace_id == env.trace_id && d.segment_id == env.segment_id)
                    .and_then(|d| d.alarm_id)
            } else {
                if opts.limit.is_some_and(|l| ingested >= l) {
                    break 'outer;
                }
                ingested += 1;
                engine.ingest(env.clone())?.alarm.map(|a| a.id)
            };
            if let (true, Some(id)) = (opts.auto_verdict, alarm_id) {
                if engine.alarm(id).is_some_and(|a| a.status == AlarmStatus::Open) {
                    engine.verdict(id, ground_truth_verdict(env, &truth))?;
                }
            }
        }
    }
    engine.wait_idle()?;

    let by_key: HashMap<(&str, u64), &DecisionSummary> = engine
        .decisions()
        .iter()
        .map(|d| ((d.trace_id.as_str(), d.segment_id), d))
        .collect();
    let mut detections = Vec::new();
    let mut complete = true;
    for seg in traces.iter().flat_map(|t| &t.segments) {
        let Some(d) = by_key.get(&(seg.envelope.trace_id.as_str(), seg.envelope.segment_id)) else {
            complete = false;
            continue;
        };
        let decide_s = (d.inference_ms + d.update_ms) / 1e3;
        detections.push(Detection {
            segment_id: d.segment_id,
            trace_id: d.trace_id.clone(),
            t_start: d.t_start,
            t_end: d.t_end,
            decision: d.decision,
            e: d.e,
            warning_delay_s: Some(seg.warned_at - seg.pause_t),
            alarm_delay_s: (d.decision == Decision::Fall).then_some(seg.emitted_at - seg.pause_t + decide_s),
            inference_ms: d.inference_ms,
            update_ms: d.update_ms,
        });
    }
    Ok(ReplayOutcome {
        report: evaluate(&detections, &truth, opts.window_s),
        detections,
        ingested,
        resumed,
        complete,
    })
}
