//! Streaming fall-like segmentation.
//!
//! On every motion-to-pause transition the segmenter looks back over the last
//! five seconds, extracts the spectral ridge and its acceleration, and if the
//! peak exceeds Θ keeps monitoring for one more second to refine the end point
//! before emitting the STFT of `[t_max - 3 s, t_end*]`.

use std::collections::VecDeque;

use super::changepoint::{changepoint_refine, default_beta, regression_cost};
use super::dynamics::{calibrate_gamma, movement_window, std_dev, DynamicsSeries};
use super::ridge::{ridge_accel, AccelMode, RidgeParams};
use super::stft::{SpectroSegment, Stft, StftConfig};
use super::DspError;
use crate::sim::{CsiFrame, DEFAULT_WAVELENGTH_M};

/// Acceleration threshold Θ (m/s²).
pub const DEFAULT_THETA: f64 = 2.5;
/// Minimum time bins of an emitted segment.
pub const MIN_SEGMENT_BINS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    pub fs: f64,
    pub gamma: f64,
    pub theta: f64,
    pub beta: f64,
    pub lambda_m: f64,
    pub accel_mode: AccelMode,
    /// STFT used for ridge / acceleration analysis.
    pub analysis: StftConfig,
    /// Finite-difference span of the acceleration, in analysis bins.
    pub fd_span: usize,
    /// STFT of emitted segments.
    pub segment: StftConfig,
    /// Per analysis bin; bins below it score zero in the ridge search.
    pub noise_floor: Vec<f64>,
    pub lookback_s: f64,
    pub pre_s: f64,
    pub refine_s: f64,
    pub debounce_s: f64,
}

/// Analysis STFT: 128-sample window, hop 4, bins 0..64.
pub const ANALYSIS_STFT: StftConfig = StftConfig {
    window: 128,
    hop: 4,
    bins: 64,
};
pub const DEFAULT_FD_SPAN: usize = 24;
/// Noise floor is `mean + k·std` of the static spectrum; analysis frames
/// overlap heavily, so noise excursions persist across many of them.
pub const NOISE_FLOOR_K: f64 = 6.0;
/// Low bins holding the static (DC) component, excluded from the ridge.
pub const DC_GUARD_BINS: usize = 2;

impl FrontendConfig {
    /// Defaults with Γ, β and the noise floor left open (no movement threshold).
    pub fn uncalibrated(fs: f64) -> Self {
        let mut floor = vec![0.0; ANALYSIS_STFT.bins];
        floor[..DC_GUARD_BINS].fill(f64::INFINITY);
        Self {
            fs,
            gamma: 0.0,
            theta: DEFAULT_THETA,
            beta: 0.0,
            lambda_m: DEFAULT_WAVELENGTH_M,
            accel_mode: AccelMode::FiniteDifference,
            analysis: ANALYSIS_STFT,
            fd_span: DEFAULT_FD_SPAN,
            segment: StftConfig::SEGMENT,
            noise_floor: floor,
            lookback_s: 5.0,
            pre_s: 3.0,
            refine_s: 1.0,
            debounce_s: 0.5,
        }
    }

    /// Calibrates Γ (3 × median moving std), β (2 × residual variance of the
    /// first second) and the per-bin noise floor from a
    /// declared static interval.
    pub fn calibrate(static_part: &DynamicsSeries) -> Result<Self, DspError> {
        let mut cfg = Self::uncalibrated(static_part.fs);
        if static_part.len() < cfg.analysis.window.max(static_part.fs as usize) {
            return Err(DspError::SegmentTooShort {
                samples: static_part.len(),
                window: cfg.analysis.window,
            });
        }
        cfg.gamma = calibrate_gamma(static_part, 3.0);
        let first_second = static_part.fs.round() as usize;
        let quiet: Vec<&[f64]> = static_part
            .streams
            .iter()
            .map(|s| &s[..first_second])
            .collect();
        cfg.beta = default_beta(&quiet);
        cfg.noise_floor = noise_floor(static_part, &Stft::new(cfg.analysis), NOISE_FLOOR_K);
        Ok(cfg)
    }

    fn ridge_params(&self) -> RidgeParams {
        RidgeParams {
            hop_s: self.analysis.hop as f64 / self.fs,
            freq_res_hz: self.analysis.freq_res_hz(self.fs),
            window_s: self.analysis.window as f64 / self.fs,
            lambda_m: self.lambda_m,
            mode: self.accel_mode,
            span: self.fd_span,
        }
    }

    fn samples(&self, secs: f64) -> usize {
        (secs * self.fs).round() as usize
    }
}

/// `mean + k·std` per bin over every frame of every stream; DC guard bins are infinite.
pub fn noise_floor(static_part: &DynamicsSeries, plan: &Stft, k: f64) -> Vec<f64> {
    let bins = plan.config().bins;
    let mut sum = vec![0.0; bins];
    let mut sq = vec![0.0; bins];
    let mut n = 0usize;
    for st in &static_part.streams {
        if let Ok(spec) = plan.spectrogram(st) {
            for t in 0..spec.frames {
                for (f, v) in spec.column(t).iter().enumerate() {
                    sum[f] += v;
                    sq[f] += v * v;
                }
            }
            n += spec.frames;
        }
    }
    let n = n.max(1) as f64;
    (0..bins)
        .map(|f| {
            if f < DC_GUARD_BINS {
                f64::INFINITY
            } else {
                let mean = sum[f] / n;
                mean + k * (sq[f] / n - mean * mean).max(0.0).sqrt()
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentBounds {
    pub t_end: f64,
    pub t_max: f64,
    pub t_end_star: f64,
    pub beta: f64,
    /// Regression cost of `S(t_end : t_end*)`, summed over streams.
    pub regression_cost: f64,
    pub peak_accel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FrontendEvent {
    /// Θ exceeded after a pause; emitted before the refinement second.
    Warning {
        t_end: f64,
        t_max: f64,
        peak_accel: f64,
        at: f64,
    },
    Segment(Emitted),
}

/// A segment with its bounds and source samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Emitted {
    pub segment: SpectroSegment,
    pub bounds: SegmentBounds,
    /// The `S(t)` samples the segment was computed from.
    pub dynamics: DynamicsSeries,
    /// Stream time of the warning that opened the refinement window.
    pub warned_at: f64,
    /// Stream time of emission.
    pub at: f64,
}

#[derive(Debug, Clone, Copy)]
enum Phase {
    Idle,
    /// Pause seen at `end`, waiting for the analysis lookahead while it holds.
    Pending { end: usize },
    /// Θ fired; waiting out the refinement window.
    Monitoring {
        end: usize,
        t_max: f64,
        peak: f64,
        warned: usize,
    },
}

/// Streaming segmenter for one trace; single owner.
pub struct Segmenter {
    cfg: FrontendConfig,
    analysis: Stft,
    segment_plan: Stft,
    trace_id: String,
    history: Vec<VecDeque<f64>>,
    /// Absolute index of `history[_][0]`.
    base: usize,
    /// Absolute index of the next sample.
    next: usize,
    t0: f64,
    moving: bool,
    phase: Phase,
    suppress_until: usize,
    /// Accelerations at or before this time belong to an emitted segment.
    consumed_until: f64,
    capacity: usize,
}

impl Segmenter {
    pub fn new(cfg: FrontendConfig, channels: usize, trace_id: impl Into<String>) -> Self {
        let capacity = cfg.samples(cfg.lookback_s + cfg.pre_s + cfg.refine_s + 3.0);
        Self {
            analysis: Stft::new(cfg.analysis),
            segment_plan: Stft::new(cfg.segment),
            trace_id: trace_id.into(),
            history: vec![VecDeque::with_capacity(capacity); channels],
            base: 0,
            next: 0,
            t0: 0.0,
            moving: false,
            phase: Phase::Idle,
            suppress_until: 0,
            consumed_until: f64::NEG_INFINITY,
            capacity,
            cfg,
        }
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn set_start_time(&mut self, t0: f64) {
        self.t0 = t0;
    }

    fn time_of(&self, idx: usize) -> f64 {
        self.t0 + idx as f64 / self.cfg.fs
    }

    fn index_of(&self, t: f64) -> usize {
        ((t - self.t0) * self.cfg.fs).round().max(0.0) as usize
    }

    /// Samples `[from, to)` of stream `c` (absolute indices, clamped to history).
    fn window(&self, c: usize, from: usize, to: usize) -> Vec<f64> {
        let from = from.max(self.base);
        let to = to.min(self.next);
        if to <= from {
            return Vec::new();
        }
        self.history[c]
            .range(from - self.base..to - self.base)
            .copied()
            .collect()
    }

    fn is_moving(&self) -> bool {
        let w = movement_window(self.cfg.fs);
        if self.next < w {
            return false;
        }
        (0..self.history.len()).any(|c| std_dev(&self.window(c, self.next - w, self.next)) > self.cfg.gamma)
    }

    pub fn push_frame(&mut self, frame: &CsiFrame) -> Result<Vec<FrontendEvent>, DspError> {
        if self.next == 0 {
            self.t0 = frame.timestamp;
        }
        let s = super::dynamics::frame_dynamics(frame)?;
        Ok(self.push(&s))
    }

    /// Appends one `S(t)` sample per stream.
    pub fn push(&mut self, sample: &[f64]) -> Vec<FrontendEvent> {
        debug_assert_eq!(sample.len(), self.history.len());
        for (h, &v) in self.history.iter_mut().zip(sample) {
            h.push_back(v);
            if h.len() > self.capacity {
                h.pop_front();
            }
        }
        let idx = self.next;
        self.base = idx + 1 - self.history[0].len();
        self.next += 1;

        let mut events = Vec::new();
        let moving = self.is_moving();
        if self.moving && !moving && idx >= self.suppress_until {
            match self.phase {
                Phase::Monitoring { .. } => {}
                _ => self.phase = Phase::Pending { end: idx },
            }
        } else if moving && matches!(self.phase, Phase::Pending { .. }) {
            // Motion resumed before the lookahead elapsed: not a pause.
            self.phase = Phase::Idle;
        }
        self.moving = moving;
        self.step(idx, false, &mut events);
        events
    }

    /// Flushes pending work at stream end using whatever samples exist.
    pub fn finish(&mut self) -> Vec<FrontendEvent> {
        let mut events = Vec::new();
        if self.next > 0 {
            self.step(self.next - 1, true, &mut events);
        }
        events
    }

    fn lookahead(&self) -> usize {
        self.cfg.analysis.window / 2
    }

    fn step(&mut self, idx: usize, at_end: bool, events: &mut Vec<FrontendEvent>) {
        if let Phase::Pending { end } = self.phase {
            if idx >= end + self.lookahead() || at_end {
                self.phase = match self.theta_test(end, idx) {
                    Some((t_max, peak)) => {
                        events.push(FrontendEvent::Warning {
                            t_end: self.time_of(end),
                            t_max,
                            peak_accel: peak,
                            at: self.time_of(idx),
                        });
                        Phase::Monitoring {
                            end,
                            t_max,
                            peak,
                            warned: idx,
                        }
                    }
                    None => Phase::Idle,
                };
            }
        }
        if let Phase::Monitoring {
            end,
            t_max,
            peak,
            warned,
        } = self.phase
        {
            let refine_len = self.cfg.samples(self.cfg.refine_s);
            if idx >= end + refine_len || at_end {
                self.phase = Phase::Idle;
                if let Some(em) = self.emit(end, t_max, peak, warned, idx) {
                    self.consumed_until = em.bounds.t_end_star;
                    self.suppress_until = idx + self.cfg.samples(self.cfg.debounce_s);
                    events.push(FrontendEvent::Segment(em));
                }
            }
        }
    }

    /// Peak acceleration over the lookback window ending at `end`; `Some` if above Θ.
    fn theta_test(&self, end: usize, now: usize) -> Option<(f64, f64)> {
        let lookback = self.cfg.samples(self.cfg.lookback_s);
        let from = end.saturating_sub(lookback).max(self.base);
        let to = now + 1;
        let params = self.cfg.ridge_params();
        let t_end = self.time_of(end);
        let first_center = self.time_of(from) + self.cfg.analysis.window as f64 / 2.0 / self.cfg.fs;
        let mut best: Option<(f64, f64)> = None;
        for c in 0..self.history.len() {
            let x = self.window(c, from, to);
            let Ok(spec) = self.analysis.spectrogram(&x) else {
                continue;
            };
            let tr = ridge_accel(&spec, &self.cfg.noise_floor, &params);
            for (a, dt) in tr.accel.iter().zip(&tr.accel_time) {
                let t = first_center + dt;
                if t > t_end || t <= self.consumed_until {
                    continue;
                }
                if best.map_or(true, |(_, b)| *a > b) {
                    best = Some((t, *a));
                }
            }
        }
        best.filter(|&(_, a)| a > self.cfg.theta)
    }

    fn emit(
        &self,
        end: usize,
        t_max: f64,
        peak: f64,
        warned: usize,
        now: usize,
    ) -> Option<Emitted> {
        let refine_len = self.cfg.samples(self.cfg.refine_s);
        let tails: Vec<Vec<f64>> = (0..self.history.len())
            .map(|c| self.window(c, end, now + 1))
            .collect();
        let refs: Vec<&[f64]> = tails.iter().map(Vec::as_slice).collect();
        let off = changepoint_refine(&refs, refine_len, self.cfg.beta);
        let star = end + off;
        let cost = refs.iter().map(|s| regression_cost(&s[..=off.min(s.len() - 1)])).sum();

        let start_t = (t_max - self.cfg.pre_s).max(self.time_of(self.base));
        let from = self.index_of(start_t).max(self.base);
        let raw: Vec<Vec<f64>> = (0..self.history.len())
            .map(|c| self.window(c, from, star + 1))
            .collect();
        let specs = raw
            .iter()
            .map(|x| self.segment_plan.spectrogram(x))
            .collect::<Result<Vec<_>, _>>()
            .ok()?;
        let mut seg = SpectroSegment::from_spectrograms(
            &specs,
            self.cfg.segment.hop as f64 / self.cfg.fs,
            self.cfg.segment.freq_res_hz(self.cfg.fs),
        );
        seg.pad_time_to(MIN_SEGMENT_BINS);
        seg.t_start = self.time_of(from);
        seg.t_end = self.time_of(star);
        seg.source_trace = self.trace_id.clone();
        let mut dynamics = DynamicsSeries::new(raw, self.cfg.fs);
        dynamics.t0 = seg.t_start;
        Some(Emitted {
            segment: seg,
            bounds: SegmentBounds {
                t_end: self.time_of(end),
                t_max,
                t_end_star: self.time_of(star),
                beta: self.cfg.beta,
                regression_cost: cost,
                peak_accel: peak,
            },
            dynamics,
            warned_at: self.time_of(warned),
            at: self.time_of(now),
        })
    }
}

/// Runs the segmenter over a whole series.
pub fn segment_stream(
    s: &DynamicsSeries,
    cfg: &FrontendConfig,
    trace_id: &str,
) -> Vec<FrontendEvent> {
    let mut seg = Segmenter::new(cfg.clone(), s.channels(), trace_id);
    seg.set_start_time(s.t0);
    let mut out = Vec::new();
    let mut sample = vec![0.0; s.channels()];
    for i in 0..s.len() {
        for (c, st) in s.streams.iter().enumerate() {
            sample[c] = st[i];
        }
        out.extend(seg.push(&sample));
    }
    out.extend(seg.finish());
    out
}

/// Just the emitted segments of [`segment_stream`].
pub fn segments_of(events: Vec<FrontendEvent>) -> Vec<Emitted> {
    events
        .into_iter()
        .filter_map(|e| match e {
            FrontendEvent::Segment(em) => Some(em),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{overlaps, sequence_scenario, simulate_and_segment};
    use crate::sim::{ChannelScenario, MotionKind};
    use std::f64::consts::PI;

    #[test]
    fn test_static_trace_yields_no_segments() {
        let sc = ChannelScenario::with_random_room(30.0, 5);
        let out = simulate_and_segment(&sc, "static").unwrap();
        assert!(out.segments.is_empty());
    }

    #[test]
    fn test_walk_rejected_fall_likes_captured() {
        let kinds = [MotionKind::Sit, MotionKind::WalkFall, MotionKind::Walk];
        let sc = sequence_scenario(&kinds, 3);
        let out = simulate_and_segment(&sc, "mix").unwrap();
        assert_eq!(out.segments.len(), 2);
        for (g, em) in out.truth.iter().zip(&out.segments) {
            let seg = &em.segment;
            assert!(seg.t_start <= g.start_s && seg.t_end >= g.end_s, "{g:?} {seg:?}");
        }
        let walk = &out.truth[2];
        assert!(!out
            .segments
            .iter()
            .any(|e| overlaps(e.segment.t_start, e.segment.t_end, walk.start_s, walk.end_s)));
    }

    #[test]
    fn test_segment_bounds_invariants() {
        let kinds = [MotionKind::Jump, MotionKind::StopFall, MotionKind::SlowFall];
        let sc = sequence_scenario(&kinds, 11);
        let out = simulate_and_segment(&sc, "b").unwrap();
        assert_eq!(out.segments.len(), 3);
        for em in &out.segments {
            let (seg, b) = (&em.segment, &em.bounds);
            assert!(b.t_max <= b.t_end);
            assert!(b.t_end <= b.t_end_star && b.t_end_star <= b.t_end + 1.0 + 1e-9);
            assert!(b.peak_accel > DEFAULT_THETA);
            assert!(seg.t >= MIN_SEGMENT_BINS && seg.f == 64 && seg.c == 3);
            assert!((seg.t_start - (b.t_max - 3.0)).abs() < 0.01);
            assert!(seg.is_valid());
            assert_eq!(seg.source_trace, "b");
            assert!((em.dynamics.t0 - seg.t_start).abs() < 1e-9);
            let plan = Stft::new(StftConfig::SEGMENT);
            let again = plan.spectrogram(&em.dynamics.streams[1]).unwrap();
            assert_eq!(again.at(3, 7), seg.get(7, 3, 1));
        }
    }

    #[test]
    fn test_warning_precedes_segment_by_refine_window() {
        let sc = sequence_scenario(&[MotionKind::WalkFall], 2);
        let out = simulate_and_segment(&sc, "w").unwrap();
        let events = segment_stream(&out.series, &out.frontend, "w");
        let warn = events.iter().find_map(|e| match e {
            FrontendEvent::Warning { at, t_end, .. } => Some((*at, *t_end)),
            _ => None,
        });
        let seg = events.iter().find_map(|e| match e {
            FrontendEvent::Segment(em) => Some(em.at),
            _ => None,
        });
        let ((warn_at, t_end), seg_at) = (warn.unwrap(), seg.unwrap());
        assert!(warn_at < seg_at);
        assert!((seg_at - t_end - 1.0).abs() < 0.01);
    }

    #[test]
    fn test_chirp_acceleration_estimate() {
        // f_D(t) = 5 + 40 t  =>  a = 0.125 · 40 = 5 m/s².
        let fs = 200.0;
        let s: Vec<f64> = (0..400)
            .map(|i| {
                let t = i as f64 / fs;
                0.8 + 0.05 * (2.0 * PI * (5.0 * t + 20.0 * t * t)).cos()
            })
            .collect();
        let cfg = FrontendConfig::uncalibrated(fs);
        let spec = Stft::new(cfg.analysis).spectrogram(&s).unwrap();
        let tr = ridge_accel(&spec, &cfg.noise_floor, &cfg.ridge_params());
        let inner = &tr.accel[cfg.fd_span..];
        let mean = inner.iter().sum::<f64>() / inner.len() as f64;
        assert!((mean - 5.0).abs() < 0.5, "mean {mean}");
    }

    #[test]
    fn test_noise_floor_guards_dc() {
        let s = DynamicsSeries::new(vec![vec![0.9; 600]], 200.0);
        let floor = noise_floor(&s, &Stft::new(ANALYSIS_STFT), NOISE_FLOOR_K);
        assert!(floor[..DC_GUARD_BINS].iter().all(|v| v.is_infinite()));
        assert!(floor[DC_GUARD_BINS..].iter().all(|v| v.is_finite()));
    }
}
