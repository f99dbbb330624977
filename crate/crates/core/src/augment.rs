//! 24× training-data augmentation.
//!
//! Gaussian noise is added to the raw `S(t)` samples before the STFT; random
//! circular time shifts are applied to the resulting spectrogram.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::dsp::segmenter::MIN_SEGMENT_BINS;
use crate::dsp::{DspError, DynamicsSeries, SpectroSegment, Stft, StftConfig};

/// Number of tensors produced per source segment.
pub const AUGMENT_FACTOR: usize = 24;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("plan yields {0} outputs, expected 24")]
    WrongCount(usize),
    #[error("max shift of {max} samples must be below the {window}-sample STFT window")]
    ShiftLimit { max: usize, window: usize },
    #[error("shift of {offset} bins is {samples} samples, limit {window}")]
    ShiftTooLarge {
        offset: isize,
        samples: usize,
        window: usize,
    },
    #[error("non-finite input")]
    NonFinite,
    #[error(transparent)]
    Dsp(#[from] DspError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPlan {
    /// `f64::INFINITY` means no noise.
    pub snr_db_levels: Vec<f64>,
    /// One zero shift plus `shifts_per_level - 1` random ones.
    pub shifts_per_level: usize,
    /// In `S(t)` samples.
    pub max_shift: usize,
}

impl Default for AugmentPlan {
    fn default() -> Self {
        Self {
            snr_db_levels: vec![f64::INFINITY, 20.0, 10.0, 5.0],
            shifts_per_level: 6,
            max_shift: 112,
        }
    }
}

impl AugmentPlan {
    pub fn validate(&self, stft: &StftConfig) -> Result<(), AugmentError> {
        let n = self.snr_db_levels.len() * self.shifts_per_level;
        if n != AUGMENT_FACTOR {
            return Err(AugmentError::WrongCount(n));
        }
        if self.max_shift >= stft.window {
            return Err(AugmentError::ShiftLimit {
                max: self.max_shift,
                window: stft.window,
            });
        }
        Ok(())
    }

    /// Largest shift in time bins for a given hop.
    pub fn max_offset(&self, hop: usize) -> usize {
        self.max_shift / hop.max(1)
    }
}

/// Adds white Gaussian noise at `snr_db` relative to the variance of `s`.
pub fn add_noise_to_dynamics<R: Rng + ?Sized>(
    s: &[f64],
    snr_db: f64,
    rng: &mut R,
) -> Result<Vec<f64>, AugmentError> {
    if s.iter().any(|v| !v.is_finite()) {
        return Err(AugmentError::NonFinite);
    }
    if snr_db == f64::INFINITY || s.is_empty() {
        return Ok(s.to_vec());
    }
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64;
    let sigma = (var / 10f64.powf(snr_db / 10.0)).sqrt();
    if sigma == 0.0 {
        return Ok(s.to_vec());
    }
    let dist = Normal::new(0.0, sigma).map_err(|_| AugmentError::NonFinite)?;
    Ok(s.iter().map(|v| v + dist.sample(rng)).collect())
}

/// Circular shift of the time axis by `offset` bins (positive moves content later).
pub fn horizontal_shift(
    seg: &SpectroSegment,
    offset: isize,
    stft: &StftConfig,
) -> Result<SpectroSegment, AugmentError> {
    let samples = offset.unsigned_abs() * stft.hop;
    if samples >= stft.window {
        return Err(AugmentError::ShiftTooLarge {
            offset,
            samples,
            window: stft.window,
        });
    }
    let mut out = seg.clone();
    let t = seg.t as isize;
    if t == 0 {
        return Ok(out);
    }
    for f in 0..seg.f {
        for ti in 0..seg.t {
            let dst = (ti as isize + offset).rem_euclid(t) as usize;
            for c in 0..seg.c {
                let v = seg.get(f, ti, c);
                let i = out.index(f, dst, c);
                out.tensor[i] = v;
            }
        }
    }
    Ok(out)
}

fn shift_offsets<R: Rng + ?Sized>(plan: &AugmentPlan, hop: usize, rng: &mut R) -> Vec<isize> {
    let m = plan.max_offset(hop) as isize;
    let mut out = vec![0];
    while out.len() < plan.shifts_per_level {
        if m == 0 {
            out.push(0);
            continue;
        }
        let k = rng.gen_range(1..=m);
        out.push(if rng.gen::<bool>() { k } else { -k });
    }
    out
}

fn spectro_of(s: &DynamicsSeries, plan: &Stft) -> Result<SpectroSegment, AugmentError> {
    let specs = s
        .streams
        .iter()
        .map(|x| plan.spectrogram(x))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = plan.config();
    let mut seg = SpectroSegment::from_spectrograms(&specs, cfg.hop as f64 / s.fs, cfg.freq_res_hz(s.fs));
    seg.pad_time_to(MIN_SEGMENT_BINS);
    seg.t_start = s.t0;
    seg.t_end = s.time_of(s.len().saturating_sub(1));
    Ok(seg)
}

/// 24 segments from one `S(t)` segment: every noise level crossed with one
/// zero and several random shifts. Element 0 is the unmodified spectrogram.
pub fn augment_24x(
    s: &DynamicsSeries,
    plan: &AugmentPlan,
    stft: &Stft,
    seed: u64,
) -> Result<Vec<SpectroSegment>, AugmentError> {
    let cfg = stft.config();
    plan.validate(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(AUGMENT_FACTOR);
    for &snr in &plan.snr_db_levels {
        let streams = s
            .streams
            .iter()
            .map(|x| add_noise_to_dynamics(x, snr, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let noisy = DynamicsSeries {
            streams,
            fs: s.fs,
            t0: s.t0,
        };
        let base = spectro_of(&noisy, stft)?;
        for off in shift_offsets(plan, cfg.hop, &mut rng) {
            out.push(horizontal_shift(&base, off, &cfg)?);
        }
    }
    Ok(out)
}

/// Fallback when only the spectrogram is available: the shift schedule of
/// [`augment_24x`] without the noise levels.
pub fn augment_shifts_only(
    seg: &SpectroSegment,
    plan: &AugmentPlan,
    stft: &StftConfig,
    seed: u64,
) -> Result<Vec<SpectroSegment>, AugmentError> {
    plan.validate(stft)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(AUGMENT_FACTOR);
    for _ in &plan.snr_db_levels {
        for off in shift_offsets(plan, stft.hop, &mut rng) {
            out.push(horizontal_shift(seg, off, stft)?);
        }
    }
    Ok(out)
}
