//! Adaptive thresholds: running mean α and running median γ of the error.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::OnlineError;
use crate::dsp::dynamics::median;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Fall,
    Suspicious,
    Normal,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Fall => "fall",
            Decision::Suspicious => "suspicious",
            Decision::Normal => "normal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    /// EMA weight of a new error in α.
    pub ema_weight: f64,
    /// Errors kept for the median γ.
    pub history: usize,
    /// Relative γ change that raises the environment-change flag.
    pub env_change: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            ema_weight: 0.01,
            history: 200,
            env_change: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    pub alpha: f64,
    pub gamma_med: f64,
    pub e_history: VecDeque<f64>,
    pub env_change_flag: bool,
    pub model_version: u64,
}

impl DetectorState {
    /// α = mean and γ = median of the pretraining errors; the most recent
    /// `history` of them seed the median window.
    pub fn from_errors(errors: &[f64], cfg: &ThresholdConfig) -> Result<Self, OnlineError> {
        if errors.is_empty() || errors.iter().any(|e| !e.is_finite() || *e < 0.0) {
            return Err(OnlineError::BadErrors);
        }
        let alpha = errors.iter().sum::<f64>() / errors.len() as f64;
        if alpha <= 0.0 {
            return Err(OnlineError::BadErrors);
        }
        let mut all = errors.to_vec();
        let gamma_med = median(&mut all);
        let keep = errors.len().saturating_sub(cfg.history);
        Ok(Self {
            alpha,
            gamma_med,
            e_history: errors[keep..].iter().copied().collect(),
            env_change_flag: false,
            model_version: 0,
        })
    }

    fn check(&self) -> Result<(), OnlineError> {
        if self.alpha > 0.0 && self.alpha.is_finite() {
            Ok(())
        } else {
            Err(OnlineError::Uninitialized)
        }
    }
}

/// Pure threshold rule: above 2α is a fall, above α suspicious.
pub fn decide(e: f64, alpha: f64) -> Decision {
    if e > 2.0 * alpha {
        Decision::Fall
    } else if e > alpha {
        Decision::Suspicious
    } else {
        Decision::Normal
    }
}

/// Classifies `e` and updates α/γ unless it is a fall.
pub fn classify(
    e: f64,
    state: &mut DetectorState,
    cfg: &ThresholdConfig,
) -> Result<Decision, OnlineError> {
    state.check()?;
    if !e.is_finite() || e < 0.0 {
        return Err(OnlineError::BadErrors);
    }
    let d = decide(e, state.alpha);
    if d != Decision::Fall {
        update_stats(state, e, cfg);
    }
    Ok(d)
}

pub fn update_stats(state: &mut DetectorState, e: f64, cfg: &ThresholdConfig) {
    let w = cfg.ema_weight;
    state.alpha = (1.0 - w) * state.alpha + w * e;
    state.e_history.push_back(e);
    while state.e_history.len() > cfg.history {
        state.e_history.pop_front();
    }
    let prev = state.gamma_med;
    let mut window: Vec<f64> = state.e_history.iter().copied().collect();
    state.gamma_med = median(&mut window);
    if prev > 0.0 && ((state.gamma_med - prev) / prev).abs() > cfg.env_change {
        state.env_change_flag = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn state(alpha: f64) -> DetectorState {
        DetectorState::from_errors(&[alpha], &ThresholdConfig::default()).unwrap()
    }

    #[test]
    fn test_three_branches() {
        let cfg = ThresholdConfig::default();
        let mut s = state(1.0);
        let before = s.clone();
        assert_eq!(classify(2.5, &mut s, &cfg).unwrap(), Decision::Fall);
        assert_eq!(s, before);
        assert_eq!(classify(1.5, &mut s, &cfg).unwrap(), Decision::Suspicious);
        assert!(s.alpha > 1.0);
        let mut s = state(1.0);
        assert_eq!(classify(0.4, &mut s, &cfg).unwrap(), Decision::Normal);
        assert!(s.alpha < 1.0 && s.alpha > 0.4);
    }

    #[test]
    fn test_boundaries() {
        assert_eq!(decide(2.0, 1.0), Decision::Suspicious);
        assert_eq!(decide(1.0, 1.0), Decision::Normal);
    }

    #[test]
    fn test_single_ema_update() {
        let mut s = state(1.0);
        update_stats(&mut s, 2.0, &ThresholdConfig::default());
        assert!((s.alpha - 1.01).abs() < 1e-15);
    }

    #[test]
    fn test_constant_stream_converges() {
        let mut s = state(1.0);
        let cfg = ThresholdConfig::default();
        for _ in 0..500 {
            update_stats(&mut s, 0.3, &cfg);
        }
        // Within 1% of the initial gap.
        assert!((s.alpha - 0.3).abs() < 0.01 * 0.7);
        assert_eq!(s.gamma_med, 0.3);
    }

    #[test]
    fn test_gamma_jump_sets_env_flag() {
        let cfg = ThresholdConfig::default();
        let mut s = DetectorState::from_errors(&vec![1.0; 200], &cfg).unwrap();
        for _ in 0..99 {
            update_stats(&mut s, 10.0, &cfg);
        }
        assert!(!s.env_change_flag);
        update_stats(&mut s, 10.0, &cfg);
        assert!(s.env_change_flag);
        assert_eq!(s.gamma_med, 5.5);
        for _ in 0..100 {
            update_stats(&mut s, 10.0, &cfg);
        }
        assert_eq!(s.gamma_med, 10.0);
    }

    #[test]
    fn test_uninitialized_and_bad_inputs() {
        let cfg = ThresholdConfig::default();
        let mut s = state(1.0);
        s.alpha = 0.0;
        assert!(matches!(classify(0.5, &mut s, &cfg), Err(OnlineError::Uninitialized)));
        assert!(DetectorState::from_errors(&[], &cfg).is_err());
        assert!(DetectorState::from_errors(&[0.0, 0.0], &cfg).is_err());
        let mut s = state(1.0);
        assert!(classify(f64::NAN, &mut s, &cfg).is_err());
    }

    proptest! {
        #[test]
        fn test_gamma_within_history_range(es in prop::collection::vec(0.01f64..10.0, 1..400)) {
            let cfg = ThresholdConfig::default();
            let mut s = state(1.0);
            for e in es {
                let _ = classify(e, &mut s, &cfg).unwrap();
                let lo = s.e_history.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = s.e_history.iter().copied().fold(0.0, f64::max);
                prop_assert!(s.gamma_med >= lo && s.gamma_med <= hi);
                prop_assert!(s.e_history.len() <= cfg.history);
                prop_assert!(s.alpha > 0.0);
            }
        }
    }
}
