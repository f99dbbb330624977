//! Phase-free amplitudes and the scale-invariant channel-dynamics series.

use serde::{Deserialize, Serialize};

use crate::sim::{CsiFrame, Trace};

use super::DspError;

/// Squared CSI magnitudes of one stream at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeVector {
    pub values: Vec<f64>,
    pub timestamp: f64,
}

/// `H·conj(H)` per subcarrier for every stream of a frame.
///
/// All phase distortions cancel; what remains is `ε₁²·|H_s + H_d|²`.
pub fn conjugate_multiply(frame: &CsiFrame) -> Vec<AmplitudeVector> {
    (0..frame.h.streams)
        .map(|c| AmplitudeVector {
            values: frame.h.stream(c).iter().map(|z| z.norm_sqr()).collect(),
            timestamp: frame.timestamp,
        })
        .collect()
}

/// Cosine similarity of `amp` against the all-ones reference vector.
pub fn cosine_similarity_ref(amp: &[f64]) -> Result<f64, DspError> {
    let sum: f64 = amp.iter().sum();
    let norm = amp.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(DspError::SignalDead);
    }
    Ok(sum / (norm * (amp.len() as f64).sqrt()))
}

/// `S(t)` per stream, one sample per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSeries {
    pub streams: Vec<Vec<f64>>,
    pub fs: f64,
    /// Timestamp of sample 0.
    pub t0: f64,
}

impl DynamicsSeries {
    pub fn new(streams: Vec<Vec<f64>>, fs: f64) -> Self {
        Self {
            streams,
            fs,
            t0: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.streams.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.streams.len()
    }

    pub fn index_of(&self, t: f64) -> usize {
        ((t - self.t0) * self.fs).round().max(0.0) as usize
    }

    pub fn time_of(&self, idx: usize) -> f64 {
        self.t0 + idx as f64 / self.fs
    }

    /// Samples `[from, to)` of every stream.
    pub fn slice(&self, from: usize, to: usize) -> DynamicsSeries {
        DynamicsSeries {
            streams: self.streams.iter().map(|s| s[from..to].to_vec()).collect(),
            fs: self.fs,
            t0: self.time_of(from),
        }
    }

    pub fn from_trace(trace: &Trace) -> Result<Self, DspError> {
        let mut streams = vec![Vec::with_capacity(trace.frames.len()); trace.streams];
        for fr in &trace.frames {
            for (c, amp) in conjugate_multiply(fr).iter().enumerate() {
                streams[c].push(cosine_similarity_ref(&amp.values)?);
            }
        }
        Ok(Self {
            streams,
            fs: trace.sample_rate_hz,
            t0: trace.frames.first().map_or(0.0, |f| f.timestamp),
        })
    }
}

/// Per-frame `S(t)` sample for every stream.
pub fn frame_dynamics(frame: &CsiFrame) -> Result<Vec<f64>, DspError> {
    conjugate_multiply(frame)
        .iter()
        .map(|a| cosine_similarity_ref(&a.values))
        .collect()
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Trailing moving standard deviation; entry `i` covers `[i+1-window, i]`
/// (shorter at the start).
pub fn moving_std(xs: &[f64], window: usize) -> Vec<f64> {
    (0..xs.len())
        .map(|i| std_dev(&xs[(i + 1).saturating_sub(window)..=i]))
        .collect()
}

/// Whether the trailing `fs/10` samples ending at `idx` vary more than `gamma`
/// on any stream.
pub fn detect_movement(s: &DynamicsSeries, idx: usize, gamma: f64) -> bool {
    let w = movement_window(s.fs);
    if idx + 1 < w {
        return false;
    }
    s.streams
        .iter()
        .any(|st| std_dev(&st[idx + 1 - w..=idx]) > gamma)
}

pub fn movement_window(fs: f64) -> usize {
    ((fs / 10.0).round() as usize).max(2)
}

/// Movement threshold: `factor` × the median trailing moving-std (max over
/// streams) of a declared static interval.
pub fn calibrate_gamma(static_part: &DynamicsSeries, factor: f64) -> f64 {
    let w = movement_window(static_part.fs);
    let n = static_part.len();
    let mut stds: Vec<f64> = (w - 1..n)
        .map(|i| {
            static_part
                .streams
                .iter()
                .map(|st| std_dev(&st[i + 1 - w..=i]))
                .fold(0.0, f64::max)
        })
        .collect();
    if stds.is_empty() {
        return 0.0;
    }
    factor * median(&mut stds)
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}
