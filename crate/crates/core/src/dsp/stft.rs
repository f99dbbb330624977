//! Hann-windowed short-time Fourier transform of the dynamics series.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{num_complex::Complex64, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{DspError, DynamicsSeries};

/// Window, hop and the number of retained one-sided bins (0..bins).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub window: usize,
    pub hop: usize,
    pub bins: usize,
}

impl StftConfig {
    /// Segment spectrogram: 128-sample window, hop 16, bins 0..=63.
    pub const SEGMENT: StftConfig = StftConfig {
        window: 128,
        hop: 16,
        bins: 64,
    };

    pub fn frames_for(&self, samples: usize) -> usize {
        if samples < self.window {
            0
        } else {
            (samples - self.window) / self.hop + 1
        }
    }

    pub fn freq_res_hz(&self, fs: f64) -> f64 {
        fs / self.window as f64
    }
}

/// Magnitude spectrogram of a single stream, stored time-major (`[t][f]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<f64>,
}

impl Spectrogram {
    pub fn zeros(bins: usize, frames: usize) -> Self {
        Self {
            bins,
            frames,
            data: vec![0.0; bins * frames],
        }
    }

    #[inline]
    pub fn at(&self, t: usize, f: usize) -> f64 {
        self.data[t * self.bins + f]
    }

    pub fn column(&self, t: usize) -> &[f64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }
}

/// Reusable STFT plan.
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Self {
        assert!(cfg.bins <= cfg.window / 2 + 1 && cfg.hop > 0);
        let n = cfg.window;
        // Periodic Hann.
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n);
        Self { cfg, window, fft }
    }

    pub fn config(&self) -> StftConfig {
        self.cfg
    }

    /// Full one-sided spectrum (bins 0..=N/2) of one frame starting at `x[0]`.
    pub fn frame_spectrum(&self, x: &[f64]) -> Vec<Complex64> {
        let n = self.cfg.window;
        let mut buf: Vec<Complex64> = x[..n]
            .iter()
            .zip(&self.window)
            .map(|(v, w)| Complex64::new(v * w, 0.0))
            .collect();
        self.fft.process(&mut buf);
        buf.truncate(n / 2 + 1);
        buf
    }

    pub fn spectrogram(&self, x: &[f64]) -> Result<Spectrogram, DspError> {
        let frames = self.cfg.frames_for(x.len());
        if frames == 0 {
            return Err(DspError::SegmentTooShort {
                samples: x.len(),
                window: self.cfg.window,
            });
        }
        let mut out = Spectrogram::zeros(self.cfg.bins, frames);
        for t in 0..frames {
            let spec = self.frame_spectrum(&x[t * self.cfg.hop..]);
            for (dst, z) in out.data[t * self.cfg.bins..(t + 1) * self.cfg.bins]
                .iter_mut()
                .zip(&spec)
            {
                *dst = z.norm();
            }
        }
        Ok(out)
    }

    pub fn window_fn(&self) -> &[f64] {
        &self.window
    }
}

/// Energy of a one-sided spectrum of a real frame, scaled so it equals the
/// windowed-signal energy `Σ (x·w)²`.
pub fn one_sided_energy(spec: &[Complex64], n: usize) -> f64 {
    let nyq = n / 2;
    spec.iter()
        .enumerate()
        .map(|(k, z)| {
            let w = if k == 0 || (n % 2 == 0 && k == nyq) { 1.0 } else { 2.0 };
            w * z.norm_sqr()
        })
        .sum::<f64>()
        / n as f64
}

/// STFT magnitude segment, `F × T × C` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectroSegment {
    pub f: usize,
    pub t: usize,
    pub c: usize,
    pub tensor: Vec<f64>,
    pub hop_s: f64,
    pub freq_res_hz: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub source_trace: String,
}

impl SpectroSegment {
    #[inline]
    pub fn index(&self, f: usize, t: usize, c: usize) -> usize {
        (f * self.t + t) * self.c + c
    }

    #[inline]
    pub fn get(&self, f: usize, t: usize, c: usize) -> f64 {
        self.tensor[self.index(f, t, c)]
    }

    pub fn energy(&self) -> f64 {
        self.tensor.iter().map(|v| v * v).sum()
    }

    /// Assembles per-stream spectrograms into an `F × T × C` tensor.
    pub fn from_spectrograms(specs: &[Spectrogram], hop_s: f64, freq_res_hz: f64) -> Self {
        let (f, t, c) = (specs[0].bins, specs[0].frames, specs.len());
        let mut tensor = vec![0.0; f * t * c];
        for (ci, sp) in specs.iter().enumerate() {
            for ti in 0..t {
                for fi in 0..f {
                    tensor[(fi * t + ti) * c + ci] = sp.at(ti, fi);
                }
            }
        }
        Self {
            f,
            t,
            c,
            tensor,
            hop_s,
            freq_res_hz,
            t_start: 0.0,
            t_end: 0.0,
            source_trace: String::new(),
        }
    }

    /// Zero-pads the time axis to at least `min_t` bins.
    pub fn pad_time_to(&mut self, min_t: usize) {
        if self.t >= min_t {
            return;
        }
        let mut tensor = vec![0.0; self.f * min_t * self.c];
        for fi in 0..self.f {
            for ti in 0..self.t {
                for ci in 0..self.c {
                    tensor[(fi * min_t + ti) * self.c + ci] = self.get(fi, ti, ci);
                }
            }
        }
        self.t = min_t;
        self.tensor = tensor;
    }

    pub fn is_valid(&self) -> bool {
        self.tensor.len() == self.f * self.t * self.c
            && self.tensor.iter().all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// Spectrogram of every stream of `s` over `[t_from, t_to]`.
pub fn stft(
    s: &DynamicsSeries,
    t_from: f64,
    t_to: f64,
    plan: &Stft,
) -> Result<SpectroSegment, DspError> {
    let from = s.index_of(t_from);
    let to = (s.index_of(t_to) + 1).min(s.len());
    if to <= from {
        return Err(DspError::SegmentTooShort {
            samples: 0,
            window: plan.cfg.window,
        });
    }
    let specs = s
        .streams
        .iter()
        .map(|st| plan.spectrogram(&st[from..to]))
        .collect::<Result<Vec<_>, _>>()?;
    let mut seg = SpectroSegment::from_spectrograms(
        &specs,
        plan.cfg.hop as f64 / s.fs,
        plan.cfg.freq_res_hz(s.fs),
    );
    seg.t_start = s.time_of(from);
    seg.t_end = s.time_of(to - 1);
    Ok(seg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(f: impl Fn(f64) -> f64, n: usize) -> DynamicsSeries {
        DynamicsSeries::new(vec![(0..n).map(|i| f(i as f64 / 200.0)).collect()], 200.0)
    }

    #[test]
    fn test_dc_energy_in_lowest_bins() {
        let s = series(|_| 0.7, 400);
        let plan = Stft::new(StftConfig::SEGMENT);
        let seg = stft(&s, 0.0, 2.0, &plan).unwrap();
        for t in 0..seg.t {
            let b0 = seg.get(0, t, 0);
            // Periodic Hann leaks a constant into bin 1 at exactly half amplitude.
            assert!((b0 - 0.7 * 64.0).abs() < 1e-9);
            assert!((seg.get(1, t, 0) - b0 / 2.0).abs() < 1e-9);
            assert!((2..seg.f).all(|f| seg.get(f, t, 0) < 1e-9));
        }
    }

    #[test]
    fn test_sinusoid_peak_bin() {
        let s = series(|t| 0.5 + 0.1 * (2.0 * PI * 20.0 * t).sin(), 1000);
        let plan = Stft::new(StftConfig::SEGMENT);
        let seg = stft(&s, 0.0, 5.0, &plan).unwrap();
        for t in 0..seg.t {
            let peak = (2..seg.f)
                .max_by(|&a, &b| seg.get(a, t, 0).total_cmp(&seg.get(b, t, 0)))
                .unwrap();
            assert_eq!(peak, (20.0f64 / 1.5625).round() as usize);
        }
    }

    #[test]
    fn test_frame_count_arithmetic() {
        let s = series(|t| t.sin(), 1000);
        let plan = Stft::new(StftConfig::SEGMENT);
        let seg = stft(&s, 0.0, 4.995, &plan).unwrap();
        assert_eq!(seg.t, (1000 - 128) / 16 + 1);
        assert_eq!(seg.t, 55);
        assert_eq!(seg.f, 64);
    }

    #[test]
    fn test_short_window_rejected() {
        let s = series(|t| t, 100);
        let plan = Stft::new(StftConfig::SEGMENT);
        assert!(matches!(
            stft(&s, 0.0, 0.4, &plan),
            Err(DspError::SegmentTooShort { .. })
        ));
    }

    #[test]
    fn test_parseval_per_frame() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..600).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let plan = Stft::new(StftConfig::SEGMENT);
        let spec_t = plan.spectrogram(&x).unwrap();
        for t in 0..spec_t.frames {
            let frame = &x[t * 16..t * 16 + 128];
            let windowed: f64 = frame
                .iter()
                .zip(plan.window_fn())
                .map(|(v, w)| (v * w).powi(2))
                .sum();
            let full = plan.frame_spectrum(frame);
            let e = one_sided_energy(&full, 128);
            assert!((e - windowed).abs() <= 1e-6 * windowed);
            // The retained tensor plus the dropped Nyquist bin accounts for all of it.
            let kept: f64 = (0..64)
                .map(|k| if k == 0 { 1.0 } else { 2.0 } * spec_t.at(t, k).powi(2))
                .sum::<f64>()
                / 128.0;
            let nyq = full[64].norm_sqr() / 128.0;
            assert!((kept + nyq - windowed).abs() <= 1e-6 * windowed);
        }
    }

    #[test]
    fn test_pad_time() {
        let s = series(|t| (7.0 * t).sin(), 300);
        let plan = Stft::new(StftConfig::SEGMENT);
        let mut seg = stft(&s, 0.0, 1.495, &plan).unwrap();
        let before = seg.clone();
        seg.pad_time_to(32);
        assert_eq!(seg.t, 32);
        assert_eq!(seg.energy(), before.energy());
        assert_eq!(seg.get(10, 3, 0), before.get(10, 3, 0));
    }
}
