use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Instantaneous Doppler frequency `f_D(t)` in Hz, `t` relative to event start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DopplerProfile {
    Constant { hz: f64 },
    /// `f0 + rate·t`.
    Chirp { f0: f64, rate: f64 },
    /// `center + amplitude·sin(2π·mod_hz·t + phase)`.
    Sinusoid {
        center: f64,
        amplitude: f64,
        mod_hz: f64,
        phase: f64,
    },
    /// Linear interpolation between `(t, hz)` knots, held constant outside them.
    Piecewise { knots: Vec<[f64; 2]> },
}

impl DopplerProfile {
    pub fn freq(&self, t: f64) -> f64 {
        match self {
            Self::Constant { hz } => *hz,
            Self::Chirp { f0, rate } => f0 + rate * t,
            Self::Sinusoid {
                center,
                amplitude,
                mod_hz,
                phase,
            } => center + amplitude * (2.0 * PI * mod_hz * t + phase).sin(),
            Self::Piecewise { knots } => piecewise_eval(knots, t),
        }
    }

    /// `∫₀ᵗ f_D(τ) dτ` in cycles.
    pub fn phase_integral(&self, t: f64) -> f64 {
        match self {
            Self::Constant { hz } => hz * t,
            Self::Chirp { f0, rate } => f0 * t + 0.5 * rate * t * t,
            Self::Sinusoid {
                center,
                amplitude,
                mod_hz,
                phase,
            } => {
                let w = 2.0 * PI * mod_hz;
                if w == 0.0 {
                    (center + amplitude * phase.sin()) * t
                } else {
                    center * t + amplitude * (phase.cos() - (w * t + phase).cos()) / w
                }
            }
            Self::Piecewise { knots } => piecewise_integral(knots, t),
        }
    }

    /// Largest `|df_D/dt|` over `[0, duration]`.
    pub fn max_abs_rate(&self, duration: f64) -> f64 {
        match self {
            Self::Constant { .. } => 0.0,
            Self::Chirp { rate, .. } => rate.abs(),
            Self::Sinusoid {
                amplitude, mod_hz, ..
            } => (2.0 * PI * mod_hz * amplitude).abs(),
            Self::Piecewise { knots } => knots
                .windows(2)
                .filter(|w| w[0][0] < duration && w[1][0] > w[0][0])
                .map(|w| ((w[1][1] - w[0][1]) / (w[1][0] - w[0][0])).abs())
                .fold(0.0, f64::max),
        }
    }

    /// Largest `|f_D|` over `[0, duration]`.
    pub fn max_abs_freq(&self, duration: f64) -> f64 {
        match self {
            Self::Constant { hz } => hz.abs(),
            Self::Chirp { f0, rate } => f0.abs().max((f0 + rate * duration).abs()),
            Self::Sinusoid {
                center, amplitude, ..
            } => center.abs() + amplitude.abs(),
            Self::Piecewise { knots } => knots.iter().map(|k| k[1].abs()).fold(0.0, f64::max),
        }
    }
}

fn piecewise_eval(knots: &[[f64; 2]], t: f64) -> f64 {
    match knots {
        [] => 0.0,
        [only] => only[1],
        _ => {
            if t <= knots[0][0] {
                return knots[0][1];
            }
            for w in knots.windows(2) {
                let ([t0, f0], [t1, f1]) = (w[0], w[1]);
                if t <= t1 {
                    if t1 <= t0 {
                        return f1;
                    }
                    return f0 + (f1 - f0) * (t - t0) / (t1 - t0);
                }
            }
            knots[knots.len() - 1][1]
        }
    }
}

fn piecewise_integral(knots: &[[f64; 2]], t: f64) -> f64 {
    if knots.is_empty() || t <= 0.0 {
        return 0.0;
    }
    // Integrate piecewise-linear segments analytically, with the constant
    // extensions on either side.
    let mut acc = 0.0;
    let mut cursor = 0.0;
    let first = knots[0];
    if first[0] > 0.0 {
        let upto = first[0].min(t);
        acc += first[1] * upto;
        cursor = upto;
    }
    for w in knots.windows(2) {
        let (a, b) = (w[0][0].max(cursor), w[1][0].min(t));
        if b > a {
            let fa = piecewise_eval(knots, a);
            let fb = piecewise_eval(knots, b);
            acc += 0.5 * (fa + fb) * (b - a);
            cursor = b;
        }
    }
    if t > cursor {
        acc += knots[knots.len() - 1][1] * (t - cursor);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_integral(p: &DopplerProfile, t: f64) -> f64 {
        let n = 20_000;
        let h = t / n as f64;
        (0..n)
            .map(|i| {
                let a = i as f64 * h;
                (p.freq(a) + 4.0 * p.freq(a + h / 2.0) + p.freq(a + h)) * h / 6.0
            })
            .sum()
    }

    #[test]
    fn test_phase_integral_matches_quadrature() {
        let profiles = [
            DopplerProfile::Constant { hz: 7.0 },
            DopplerProfile::Chirp { f0: 3.0, rate: 40.0 },
            DopplerProfile::Sinusoid {
                center: 8.0,
                amplitude: 1.5,
                mod_hz: 0.9,
                phase: 0.4,
            },
            DopplerProfile::Piecewise {
                knots: vec![[0.1, 5.0], [0.6, 25.0], [0.9, 25.0], [1.3, 6.0]],
            },
        ];
        for p in &profiles {
            for t in [0.05, 0.37, 1.0, 1.7] {
                let exact = p.phase_integral(t);
                let quad = numeric_integral(p, t);
                assert!((exact - quad).abs() < 1e-6, "{p:?} t={t}: {exact} vs {quad}");
            }
        }
    }

    #[test]
    fn test_piecewise_rate() {
        let p = DopplerProfile::Piecewise {
            knots: vec![[0.0, 5.0], [0.5, 25.0], [1.0, 5.0]],
        };
        assert!((p.max_abs_rate(1.0) - 40.0).abs() < 1e-12);
        assert_eq!(p.max_abs_freq(1.0), 25.0);
        assert_eq!(p.freq(0.25), 15.0);
        assert_eq!(p.freq(2.0), 5.0);
    }
}
