//! Continuity-constrained spectral ridge and the acceleration derived from it.

use super::stft::Spectrogram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AccelMode {
    /// `λ·Δridge/Δt` over `span` time bins.
    #[default]
    FiniteDifference,
    /// `λ·ridge/window`, the ridge frequency read directly as a rate.
    RidgeValue,
}

impl std::str::FromStr for AccelMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fd" => Ok(Self::FiniteDifference),
            "ridge" => Ok(Self::RidgeValue),
            other => Err(format!("unknown accel mode `{other}` (fd|ridge)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccelTrace {
    /// Ridge bin index per time bin.
    pub ridge_bins: Vec<usize>,
    pub ridge_hz: Vec<f64>,
    /// m/s²
    pub accel: Vec<f64>,
    /// Time (s, relative to the first frame center) each accel sample refers to.
    pub accel_time: Vec<f64>,
    /// Whether the ridge sits on above-floor energy at each time bin.
    pub supported: Vec<bool>,
    pub score: f64,
    pub lambda_m: f64,
}

/// Maximum-score path through the spectrogram with `|f_i - f_{i-1}| <= 1`.
///
/// Bins whose magnitude is below `noise_floor[f]` score zero. Among
/// equal-score paths the one with the fewest bin changes wins, then the
/// lowest bins.
pub fn ridge_path(spec: &Spectrogram, noise_floor: &[f64]) -> (Vec<usize>, f64) {
    let (nf, nt) = (spec.bins, spec.frames);
    if nt == 0 || nf == 0 {
        return (Vec::new(), 0.0);
    }
    let gain = |t: usize, f: usize| {
        let v = spec.at(t, f);
        if v >= noise_floor.get(f).copied().unwrap_or(0.0) {
            v
        } else {
            0.0
        }
    };
    // (score, changes) per bin; lexicographic: higher score, then fewer changes.
    let mut best: Vec<(f64, u32)> = (0..nf).map(|f| (gain(0, f), 0)).collect();
    let mut back = vec![0u32; nf * nt];
    let better = |a: (f64, u32), b: (f64, u32)| a.0 > b.0 || (a.0 == b.0 && a.1 < b.1);
    let mut next = vec![(0.0, 0u32); nf];
    for t in 1..nt {
        for f in 0..nf {
            let mut arg = f;
            let mut cand = best[f];
            for p in [f.wrapping_sub(1), f + 1] {
                if p < nf {
                    let c = (best[p].0, best[p].1 + 1);
                    if better(c, cand) || (!better(cand, c) && p < arg) {
                        cand = c;
                        arg = p;
                    }
                }
            }
            next[f] = (cand.0 + gain(t, f), cand.1);
            back[t * nf + f] = arg as u32;
        }
        std::mem::swap(&mut best, &mut next);
    }
    let mut end = 0;
    for f in 1..nf {
        if better(best[f], best[end]) {
            end = f;
        }
    }
    let score = best[end].0;
    let mut path = vec![0usize; nt];
    path[nt - 1] = end;
    for t in (1..nt).rev() {
        path[t - 1] = back[t * nf + path[t]] as usize;
    }
    (path, score)
}

/// Score of an explicit path under the same noise-floor rule.
pub fn path_score(spec: &Spectrogram, noise_floor: &[f64], path: &[usize]) -> f64 {
    path.iter()
        .enumerate()
        .map(|(t, &f)| {
            let v = spec.at(t, f);
            if v >= noise_floor.get(f).copied().unwrap_or(0.0) {
                v
            } else {
                0.0
            }
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RidgeParams {
    pub hop_s: f64,
    pub freq_res_hz: f64,
    pub window_s: f64,
    pub lambda_m: f64,
    pub mode: AccelMode,
    /// Finite-difference span in time bins (1 = adjacent bins).
    pub span: usize,
}

/// Parabolic peak offset in `[-0.5, 0.5]` around bin `f` at frame `t`; zero
/// when `f` is not a local maximum or sits on the spectrum edge.
fn sub_bin_offset(spec: &Spectrogram, t: usize, f: usize) -> f64 {
    if f == 0 || f + 1 >= spec.bins {
        return 0.0;
    }
    let (a, b, c) = (spec.at(t, f - 1), spec.at(t, f), spec.at(t, f + 1));
    let denom = a - 2.0 * b + c;
    if b < a || b < c || denom >= 0.0 {
        return 0.0;
    }
    (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
}

/// Ridge extraction followed by acceleration `a = λ·d f_D/dt`.
///
/// Finite differences are only taken across time bins where the ridge rests
/// on above-floor energy; elsewhere the path is unconstrained and the
/// acceleration is reported as zero.
pub fn ridge_accel(spec: &Spectrogram, noise_floor: &[f64], p: &RidgeParams) -> AccelTrace {
    let (bins, score) = ridge_path(spec, noise_floor);
    let supported: Vec<bool> = bins
        .iter()
        .enumerate()
        .map(|(t, &f)| {
            let v = spec.at(t, f);
            v > 0.0 && v >= noise_floor.get(f).copied().unwrap_or(0.0)
        })
        .collect();
    let ridge_hz: Vec<f64> = bins
        .iter()
        .enumerate()
        .map(|(t, &b)| (b as f64 + sub_bin_offset(spec, t, b)) * p.freq_res_hz)
        .collect();
    let n = ridge_hz.len();
    let span = p.span.max(1);
    let mut accel = vec![0.0; n];
    let mut accel_time = vec![0.0; n];
    for i in 0..n {
        match p.mode {
            AccelMode::FiniteDifference => {
                let j = i.saturating_sub(span);
                if i > j && supported[j..=i].iter().all(|&s| s) {
                    accel[i] = p.lambda_m * (ridge_hz[i] - ridge_hz[j]) / ((i - j) as f64 * p.hop_s);
                }
                accel_time[i] = 0.5 * (i + j) as f64 * p.hop_s;
            }
            AccelMode::RidgeValue => {
                accel[i] = p.lambda_m * ridge_hz[i] / p.window_s;
                accel_time[i] = i as f64 * p.hop_s;
            }
        }
    }
    AccelTrace {
        ridge_bins: bins,
        ridge_hz,
        accel,
        accel_time,
        supported,
        score,
        lambda_m: p.lambda_m,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive maximum over every continuity-respecting path.
    fn brute_force(spec: &Spectrogram, floor: &[f64]) -> f64 {
        fn go(spec: &Spectrogram, floor: &[f64], path: &mut Vec<usize>, best: &mut f64) {
            if path.len() == spec.frames {
                *best = best.max(path_score(spec, floor, path));
                return;
            }
            let cands: Vec<usize> = match path.last() {
                None => (0..spec.bins).collect(),
                Some(&p) => (p.saturating_sub(1)..=(p + 1).min(spec.bins - 1)).collect(),
            };
            for f in cands {
                path.push(f);
                go(spec, floor, path, best);
                path.pop();
            }
        }
        let mut best = f64::NEG_INFINITY;
        go(spec, floor, &mut Vec::new(), &mut best);
        best
    }

    fn random_spec(rng: &mut ChaCha8Rng, bins: usize, frames: usize) -> Spectrogram {
        Spectrogram {
            bins,
            frames,
            data: (0..bins * frames).map(|_| rng.gen_range(0.0..1.0)).collect(),
        }
    }

    #[test]
    fn test_dp_matches_brute_force_8x10() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let spec = random_spec(&mut rng, 8, 10);
        let floor = vec![0.0; 8];
        let (path, score) = ridge_path(&spec, &floor);
        assert_eq!(score, brute_force(&spec, &floor));
        assert_eq!(path_score(&spec, &floor, &path), score);
    }

    #[test]
    fn test_dp_matches_brute_force_with_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let f = rng.gen_range(1..=6);
            let t = rng.gen_range(1..=7);
            let spec = random_spec(&mut rng, f, t);
            let floor: Vec<f64> = (0..f).map(|_| rng.gen_range(0.0..0.8)).collect();
            let (path, score) = ridge_path(&spec, &floor);
            assert_eq!(score, brute_force(&spec, &floor));
            assert!(path.windows(2).all(|w| w[0].abs_diff(w[1]) <= 1));
        }
    }

    #[test]
    fn test_constant_ridge_zero_accel() {
        let mut spec = Spectrogram::zeros(16, 12);
        for t in 0..12 {
            spec.data[t * 16 + 5] = 3.0;
        }
        let p = RidgeParams {
            hop_s: 0.08,
            freq_res_hz: 1.5625,
            window_s: 0.64,
            lambda_m: 0.125,
            mode: AccelMode::FiniteDifference,
            span: 1,
        };
        let tr = ridge_accel(&spec, &[0.0; 16], &p);
        assert!(tr.ridge_bins.iter().all(|&b| b == 5));
        assert!(tr.accel[1..].iter().all(|&a| a == 0.0));
    }

    #[test]
    fn test_finite_difference_formula() {
        // Ridge climbing one bin per frame.
        let mut spec = Spectrogram::zeros(16, 6);
        for t in 0..6 {
            spec.data[t * 16 + 2 + t] = 1.0;
        }
        let p = RidgeParams {
            hop_s: 0.08,
            freq_res_hz: 1.5625,
            window_s: 0.64,
            lambda_m: 0.125,
            mode: AccelMode::FiniteDifference,
            span: 1,
        };
        let tr = ridge_accel(&spec, &[0.0; 16], &p);
        assert_eq!(tr.ridge_bins, vec![2, 3, 4, 5, 6, 7]);
        for a in &tr.accel[1..] {
            assert!((a - 0.125 * 1.5625 / 0.08).abs() < 1e-12);
        }
        let rv = ridge_accel(
            &spec,
            &[0.0; 16],
            &RidgeParams {
                mode: AccelMode::RidgeValue,
                ..p
            },
        );
        assert!((rv.accel[3] - 0.125 * 5.0 * 1.5625 / 0.64).abs() < 1e-12);
    }

    #[test]
    fn test_silence_keeps_ridge_flat() {
        // Energy only in the middle frames; the silent ends should not add steps.
        let mut spec = Spectrogram::zeros(16, 20);
        for t in 8..12 {
            spec.data[t * 16 + 9] = 1.0;
        }
        let (path, _) = ridge_path(&spec, &[0.0; 16]);
        assert!(path.iter().all(|&b| b == 9), "{path:?}");
    }
}
