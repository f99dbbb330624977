//! Activity presets and synthetic corpora built on the simulator.
//!
//! Every preset is one Doppler reflector. Benign fall-like activities rise
//! and fall back smoothly; falls ramp to a high Doppler frequency and stop
//! abruptly (impact), followed by a pause.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::segmenter::{segments_of, Emitted, FrontendConfig};
use crate::dsp::{segment_stream, DynamicsSeries};
use crate::sim::{
    generate_trace, ChannelScenario, DopplerProfile, GroundTruthEvent, MotionEvent, MotionKind,
    SimError, Trace, DEFAULT_WAVELENGTH_M,
};

/// Static lead-in used for calibration at the start of every corpus trace.
pub const CALIBRATION_S: f64 = 5.0;
/// Quiet gap after each event.
pub const GAP_S: f64 = 6.0;

const BASE_HZ: f64 = 5.0;
const REFLECT_GAIN: (f64, f64) = (0.3, 0.45);

fn rate_for(accel: f64) -> f64 {
    accel / DEFAULT_WAVELENGTH_M
}

fn knots(points: &[(f64, f64)]) -> DopplerProfile {
    DopplerProfile::Piecewise {
        knots: points.iter().map(|&(t, f)| [t, f]).collect(),
    }
}

/// Builds one event of `kind` starting at `start`.
pub fn preset_event<R: Rng>(kind: MotionKind, start: f64, rng: &mut R) -> MotionEvent {
    let gain = rng.gen_range(REFLECT_GAIN.0..REFLECT_GAIN.1);
    let (doppler, duration) = match kind {
        MotionKind::Walk => {
            let d = rng.gen_range(3.0..5.0);
            (
                DopplerProfile::Sinusoid {
                    center: rng.gen_range(7.0..10.0),
                    amplitude: rng.gen_range(0.5..1.0),
                    mod_hz: rng.gen_range(0.5..1.0),
                    phase: rng.gen_range(0.0..6.28),
                },
                d,
            )
        }
        MotionKind::Swing => {
            let d = rng.gen_range(2.0..4.0);
            (
                DopplerProfile::Sinusoid {
                    center: 8.0,
                    amplitude: rng.gen_range(0.6..1.2),
                    mod_hz: rng.gen_range(0.4..0.7),
                    phase: 0.0,
                },
                d,
            )
        }
        MotionKind::Sit => {
            // Smooth rise and symmetric deceleration.
            let peak = rng.gen_range(24.0..30.0);
            let up = (peak - BASE_HZ) / rate_for(rng.gen_range(5.0..7.0));
            let down = up * rng.gen_range(1.0..1.4);
            (
                knots(&[(0.0, BASE_HZ), (up, peak), (up + down, BASE_HZ)]),
                up + down,
            )
        }
        MotionKind::Squat => {
            let peak = rng.gen_range(20.0..26.0);
            let r = rate_for(rng.gen_range(5.0..7.0));
            let ramp = (peak - BASE_HZ) / r;
            let hold = rng.gen_range(0.2..0.4);
            let pts = [
                (0.0, BASE_HZ),
                (ramp, peak),
                (2.0 * ramp, BASE_HZ),
                (2.0 * ramp + hold, BASE_HZ),
                (3.0 * ramp + hold, peak),
                (4.0 * ramp + hold, BASE_HZ),
            ];
            (knots(&pts), 4.0 * ramp + hold)
        }
        MotionKind::Jump => {
            let peak = rng.gen_range(24.0..30.0);
            let r = rate_for(rng.gen_range(5.5..7.5));
            let ramp = (peak - BASE_HZ) / r;
            let air = rng.gen_range(0.25..0.4);
            let pts = [
                (0.0, BASE_HZ),
                (ramp, peak),
                (2.0 * ramp, BASE_HZ),
                (2.0 * ramp + air, BASE_HZ),
                (2.5 * ramp + air, 0.6 * peak + 0.4 * BASE_HZ),
                (3.0 * ramp + air, BASE_HZ),
            ];
            (knots(&pts), 3.0 * ramp + air)
        }
        MotionKind::Bow => {
            let peak = rng.gen_range(20.0..26.0);
            let r = rate_for(rng.gen_range(5.0..7.0));
            let ramp = (peak - BASE_HZ) / r;
            let hold = rng.gen_range(0.3..0.6);
            let pts = [
                (0.0, BASE_HZ),
                (ramp, peak),
                (ramp + hold, peak),
                (2.0 * ramp + hold, BASE_HZ),
            ];
            (knots(&pts), 2.0 * ramp + hold)
        }
        MotionKind::StopFall | MotionKind::WalkFall | MotionKind::SlowFall => {
            let lead = match kind {
                MotionKind::WalkFall => rng.gen_range(1.0..1.5),
                _ => rng.gen_range(0.2..0.4),
            };
            let lead_hz = match kind {
                MotionKind::WalkFall => rng.gen_range(7.0..9.0),
                _ => BASE_HZ,
            };
            let (accel, fall_s) = match kind {
                MotionKind::SlowFall => (rng.gen_range(5.0..6.5), rng.gen_range(0.6..0.8)),
                _ => (rng.gen_range(6.0..8.0), rng.gen_range(0.45..0.7)),
            };
            let peak = (lead_hz + rate_for(accel) * fall_s).min(48.0);
            let pts = [(0.0, lead_hz), (lead, lead_hz), (lead + fall_s, peak)];
            (knots(&pts), lead + fall_s)
        }
        MotionKind::Custom => (DopplerProfile::Constant { hz: 8.0 }, 1.0),
    };
    MotionEvent {
        kind,
        start_s: start,
        end_s: start + duration,
        doppler,
        reflect_gain: gain,
        ends_in_pause: true,
        stream_phase: rng.gen_range(0.5..1.5),
        subcarrier_phase: rng.gen_range(0.05..0.2),
    }
}

/// A trace with a static lead-in followed by `kinds` separated by quiet gaps.
pub fn sequence_scenario(kinds: &[MotionKind], seed: u64) -> ChannelScenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xC0FFEE);
    let mut t = CALIBRATION_S + rng.gen_range(0.5..1.5);
    let mut events = Vec::with_capacity(kinds.len());
    for &k in kinds {
        let ev = preset_event(k, t, &mut rng);
        t = ev.end_s + GAP_S + rng.gen_range(0.0..1.0);
        events.push(ev);
    }
    let mut sc = ChannelScenario::with_random_room(t, seed);
    sc.events = events;
    sc
}

/// Segments of one simulated trace together with its ground truth.
pub struct Segmented {
    pub trace: Trace,
    pub truth: Vec<GroundTruthEvent>,
    pub segments: Vec<Emitted>,
    pub series: DynamicsSeries,
    pub frontend: FrontendConfig,
}

/// Simulates, calibrates on the static lead-in and segments a scenario.
pub fn simulate_and_segment(sc: &ChannelScenario, trace_id: &str) -> Result<Segmented, SimError> {
    let (trace, truth) = generate_trace(sc)?;
    segment_trace(trace, truth, trace_id)
}

/// Calibrates on the first [`CALIBRATION_S`] of `trace` and segments the rest.
pub fn segment_trace(trace: Trace, truth: Vec<GroundTruthEvent>, trace_id: &str) -> Result<Segmented, SimError> {
    let series = DynamicsSeries::from_trace(&trace).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
    let calib_end = series.index_of(CALIBRATION_S).min(series.len());
    let frontend = FrontendConfig::calibrate(&series.slice(0, calib_end))
        .map_err(|e| SimError::InvalidScenario(e.to_string()))?;
    let segments = segments_of(segment_stream(&series, &frontend, trace_id));
    Ok(Segmented {
        trace,
        truth,
        segments,
        series,
        frontend,
    })
}

/// Whether `[a0, a1]` and `[b0, b1]` intersect.
pub fn overlaps(a0: f64, a1: f64, b0: f64, b1: f64) -> bool {
    a0 <= b1 && b0 <= a1
}
