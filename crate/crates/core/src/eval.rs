//! Event-level TPR/FPR, windowed metrics and latency summaries.

use serde::{Deserialize, Serialize};

use crate::online::Decision;
use crate::sim::{GroundTruthEvent, MotionKind};

/// One decided segment as seen by the evaluator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub segment_id: u64,
    pub trace_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub decision: Decision,
    pub e: f64,
    /// Stream seconds from the pause point to the warning.
    pub warning_delay_s: Option<f64>,
    /// Stream seconds from the pause point to segment emission plus the
    /// decision wall time.
    pub alarm_delay_s: Option<f64>,
    pub inference_ms: f64,
    pub update_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthEvent {
    pub trace_id: String,
    #[serde(flatten)]
    pub event: GroundTruthEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LatencyStats {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

impl LatencyStats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        let pct = |p: f64| {
            let rank = (p * (v.len() - 1) as f64).round() as usize;
            v[rank.min(v.len() - 1)]
        };
        Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p50: pct(0.5),
            p95: pct(0.95),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LatencySummary {
    pub inference: LatencyStats,
    pub update: LatencyStats,
    pub warning: LatencyStats,
    pub alarm: LatencyStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub window_start: f64,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Detected falls over all fall events.
    pub tpr: f64,
    /// Benign fall-like events with a fall decision over all benign fall-like events.
    pub fpr: f64,
    pub falls: usize,
    pub detected_falls: usize,
    pub negatives: usize,
    pub false_alarms: usize,
    /// Fall decisions matching no fall or benign fall-like event.
    pub spurious_alarms: usize,
    pub decisions: usize,
    pub per_window: Vec<WindowMetrics>,
    pub latency_ms: LatencySummary,
}

impl EvalReport {
    /// The report without wall-clock measurements.
    pub fn deterministic(&self) -> EvalReport {
        let mut r = self.clone();
        r.latency_ms.inference = LatencyStats::default();
        r.latency_ms.update = LatencyStats::default();
        r.latency_ms.alarm = LatencyStats::default();
        r
    }
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Index of the truth event an interval belongs to: same trace, largest overlap.
pub fn matched_event(trace_id: &str, t_start: f64, t_end: f64, truth: &[TruthEvent]) -> Option<usize> {
    truth
        .iter()
        .enumerate()
        .filter(|(_, t)| t.trace_id == trace_id)
        .map(|(i, t)| (i, overlap(t_start, t_end, t.event.start_s, t.event.end_s)))
        .filter(|&(_, o)| o > 0.0)
        .fold(None, |best: Option<(usize, f64)>, (i, o)| match best {
            Some((_, bo)) if bo >= o => best,
            _ => Some((i, o)),
        })
        .map(|(i, _)| i)
}

/// Benign activities the segmenter is meant to pass on (not walking or swinging).
fn is_negative(e: &GroundTruthEvent) -> bool {
    !e.is_fall && !matches!(e.kind, MotionKind::Walk | MotionKind::Swing)
}

fn rate(hit: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Matches detections to ground truth and summarises, with per-window rates
/// over windows of `window_s` stream seconds keyed by event start.
pub fn evaluate(detections: &[Detection], truth: &[TruthEvent], window_s: f64) -> EvalReport {
    let mut alarmed = vec![false; truth.len()];
    let mut spurious = 0;
    for d in detections {
        let m = matched_event(&d.trace_id, d.t_start, d.t_end, truth);
        if d.decision == Decision::Fall {
            match m {
                Some(i) if truth[i].event.is_fall || is_negative(&truth[i].event) => alarmed[i] = true,
                _ => spurious += 1,
            }
        }
    }
    let count = |pred: &dyn Fn(usize) -> bool| (0..truth.len()).filter(|&i| pred(i)).count();
    let falls = count(&|i| truth[i].event.is_fall);
    let detected = count(&|i| truth[i].event.is_fall && alarmed[i]);
    let negatives = count(&|i| is_negative(&truth[i].event));
    let false_alarms = count(&|i| is_negative(&truth[i].event) && alarmed[i]);

    let mut per_window = Vec::new();
    if window_s > 0.0 && !truth.is_empty() {
        let end = truth.iter().map(|t| t.event.start_s).fold(0.0, f64::max);
        let windows = (end / window_s).floor() as usize + 1;
        for w in 0..windows {
            let (lo, hi) = (w as f64 * window_s, (w + 1) as f64 * window_s);
            let inside = |i: usize| truth[i].event.start_s >= lo && truth[i].event.start_s < hi;
            let f = count(&|i| inside(i) && truth[i].event.is_fall);
            let fd = count(&|i| inside(i) && truth[i].event.is_fall && alarmed[i]);
            let n = count(&|i| inside(i) && is_negative(&truth[i].event));
            let na = count(&|i| inside(i) && is_negative(&truth[i].event) && alarmed[i]);
            per_window.push(WindowMetrics {
                window_start: lo,
                tpr: rate(fd, f),
                fpr: rate(na, n),
            });
        }
    }

    let pick = |f: &dyn Fn(&Detection) -> Option<f64>| -> Vec<f64> { detections.iter().filter_map(f).collect() };
    let latency_ms = LatencySummary {
        inference: LatencyStats::of(&pick(&|d| Some(d.inference_ms))),
        update: LatencyStats::of(&pick(&|d| Some(d.update_ms))),
        warning: LatencyStats::of(&pick(&|d| d.warning_delay_s.map(|s| s * 1e3))),
        alarm: LatencyStats::of(&pick(&|d| {
            (d.decision == Decision::Fall).then_some(d.alarm_delay_s).flatten().map(|s| s * 1e3)
        })),
    };
    EvalReport {
        tpr: rate(detected, falls).unwrap_or(0.0),
        fpr: rate(false_alarms, negatives).unwrap_or(0.0),
        falls,
        detected_falls: detected,
        negatives,
        false_alarms,
        spurious_alarms: spurious,
        decisions: detections.len(),
        per_window,
        latency_ms,
    }
}

/// Area under the ROC curve of scores where `pos` should rank above `neg`
/// (Mann–Whitney statistic, ties count one half).
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> f64 {
    if pos.is_empty() || neg.is_empty() {
        return f64::NAN;
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&v| (v, true)).chain(neg.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Average ranks over ties.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|x| x.1).count() as f64 * avg;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(trace: &str, kind: MotionKind, s: f64, e: f64) -> TruthEvent {
        TruthEvent {
            trace_id: trace.into(),
            event: GroundTruthEvent {
                kind,
                start_s: s,
                end_s: e,
                is_fall: kind.is_fall(),
            },
        }
    }

    fn det(id: u64, trace: &str, s: f64, e: f64, decision: Decision) -> Detection {
        Detection {
            segment_id: id,
            trace_id: trace.into(),
            t_start: s,
            t_end: e,
            decision,
            e: 0.0,
            warning_delay_s: Some(0.3),
            alarm_delay_s: Some(1.2),
            inference_ms: 5.0,
            update_ms: 0.1,
        }
    }

    fn corpus() -> Vec<TruthEvent> {
        vec![
            ev("a", MotionKind::WalkFall, 10.0, 12.0),
            ev("a", MotionKind::Sit, 20.0, 22.0),
            ev("a", MotionKind::Walk, 30.0, 33.0),
            ev("b", MotionKind::StopFall, 10.0, 11.0),
        ]
    }

    #[test]
    fn test_perfect_detector() {
        let d = vec![
            det(1, "a", 8.0, 13.0, Decision::Fall),
            det(2, "a", 18.0, 23.0, Decision::Normal),
            det(3, "b", 8.0, 12.0, Decision::Fall),
        ];
        let r = evaluate(&d, &corpus(), 1200.0);
        assert_eq!((r.tpr, r.fpr), (1.0, 0.0));
        assert_eq!((r.falls, r.negatives), (2, 1));
        assert_eq!(r.per_window.len(), 1);
        assert_eq!(r.latency_ms.alarm.count, 2);
    }

    #[test]
    fn test_alarm_on_everything() {
        let d = vec![
            det(1, "a", 8.0, 13.0, Decision::Fall),
            det(2, "a", 18.0, 23.0, Decision::Fall),
            det(3, "a", 29.0, 34.0, Decision::Fall),
            det(4, "b", 8.0, 12.0, Decision::Fall),
            det(5, "b", 50.0, 52.0, Decision::Fall),
        ];
        let r = evaluate(&d, &corpus(), 1200.0);
        assert_eq!((r.tpr, r.fpr), (1.0, 1.0));
        // The walk alarm and the unmatched one.
        assert_eq!(r.spurious_alarms, 2);
    }

    #[test]
    fn test_trace_ids_separate_matches() {
        // A fall decision on trace "b" must not credit trace "a"'s fall.
        let d = vec![det(1, "b", 9.0, 12.0, Decision::Fall)];
        let r = evaluate(&d, &corpus(), 0.0);
        assert_eq!(r.detected_falls, 1);
        assert_eq!(r.tpr, 0.5);
        assert!(r.per_window.is_empty());
    }

    #[test]
    fn test_windows() {
        let truth = vec![
            ev("a", MotionKind::WalkFall, 10.0, 12.0),
            ev("a", MotionKind::Sit, 70.0, 72.0),
        ];
        let d = vec![det(1, "a", 69.0, 73.0, Decision::Fall)];
        let r = evaluate(&d, &truth, 60.0);
        assert_eq!(r.per_window.len(), 2);
        assert_eq!(r.per_window[0].tpr, Some(0.0));
        assert_eq!(r.per_window[0].fpr, None);
        assert_eq!(r.per_window[1].fpr, Some(1.0));
    }

    #[test]
    fn test_latency_percentiles() {
        let s = LatencyStats::of(&[5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!((s.p50, s.max, s.count), (3.0, 5.0, 5));
        assert_eq!(s.mean, 3.0);
        assert_eq!(LatencyStats::of(&[]).count, 0);
    }

    #[test]
    fn test_auc_known_values() {
        assert_eq!(roc_auc(&[3.0, 4.0], &[1.0, 2.0]), 1.0);
        assert_eq!(roc_auc(&[1.0, 2.0], &[3.0, 4.0]), 0.0);
        assert_eq!(roc_auc(&[1.0], &[1.0]), 0.5);
        assert_eq!(roc_auc(&[1.0, 3.0], &[2.0]), 0.5);
    }

    proptest! {
        #[test]
        fn test_auc_matches_pair_count(pos in prop::collection::vec(0u8..20, 1..30), neg in prop::collection::vec(0u8..20, 1..30)) {
            let p: Vec<f64> = pos.iter().map(|&v| v as f64).collect();
            let n: Vec<f64> = neg.iter().map(|&v| v as f64).collect();
            let mut s = 0.0;
            for a in &p {
                for b in &n {
                    s += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
            let want = s / (p.len() * n.len()) as f64;
            prop_assert!((roc_auc(&p, &n) - want).abs() < 1e-12);
        }
    }
}
