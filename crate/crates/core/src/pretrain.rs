//! Pretraining on simulated benign fall-like activities and held-out scoring.

use thiserror::Error;

use crate::augment::{augment_24x, AugmentError, AugmentPlan};
use crate::corpus::{sequence_scenario, simulate_and_segment};
use crate::dsp::{Emitted, Stft, StftConfig};
use crate::fallnet::{fit, EpochReport, FallNet, FallNetConfig, FallNetError, Tensor3, TrainConfig};
use crate::online::{initial_state, DetectorState, OnlineError, ThresholdConfig};
use crate::sim::{MotionKind, SimError};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Model(#[from] FallNetError),
    #[error(transparent)]
    Online(#[from] OnlineError),
    #[error("the benign corpus produced no segments")]
    Empty,
}

/// Seed offsets keeping training and held-out traces disjoint.
const TRAIN_BASE: u64 = 0;
const BENIGN_TEST_BASE: u64 = 50_000;
const FALL_TEST_BASE: u64 = 70_000;
const SEED_STRIDE: u64 = 100_000;

fn trace_seed(seed: u64, base: u64, i: usize) -> u64 {
    seed.wrapping_mul(SEED_STRIDE).wrapping_add(base + i as u64)
}

/// Segments of `traces` simulated traces, each running through `kinds` once.
pub fn simulate_segments(kinds: &[MotionKind], traces: usize, seed: u64, base: u64) -> Result<Vec<Emitted>, SimError> {
    let mut out = Vec::new();
    for i in 0..traces {
        let s = trace_seed(seed, base, i);
        out.extend(simulate_and_segment(&sequence_scenario(kinds, s), &format!("{base}-{i}"))?.segments);
    }
    Ok(out)
}

pub struct PretrainSet {
    pub segments: Vec<Emitted>,
    /// 24 variants per segment, in segment order.
    pub augmented: Vec<Tensor3<f32>>,
}

impl PretrainSet {
    pub fn originals(&self) -> Vec<Tensor3<f32>> {
        self.segments.iter().map(|e| Tensor3::from_segment(&e.segment).cast()).collect()
    }
}

/// Benign fall-like segments from `traces` traces (four activities each),
/// augmented 24×.
pub fn benign_set(traces: usize, seed: u64, plan: &AugmentPlan) -> Result<PretrainSet, PretrainError> {
    let segments = simulate_segments(&MotionKind::BENIGN_FALL_LIKE, traces, seed, TRAIN_BASE)?;
    if segments.is_empty() {
        return Err(PretrainError::Empty);
    }
    let stft = Stft::new(StftConfig::SEGMENT);
    let mut augmented = Vec::with_capacity(segments.len() * plan.snr_db_levels.len() * plan.shifts_per_level);
    for (i, em) in segments.iter().enumerate() {
        let aug_seed = seed.wrapping_mul(SEED_STRIDE) ^ i as u64;
        for s in augment_24x(&em.dynamics, plan, &stft, aug_seed)? {
            augmented.push(Tensor3::from_segment(&s).cast());
        }
    }
    Ok(PretrainSet { segments, augmented })
}

pub struct Pretrained {
    pub net: FallNet<f32>,
    /// α and γ over the un-augmented training segments.
    pub state: DetectorState,
    pub epochs: Vec<EpochReport>,
}

pub fn pretrain(
    set: &PretrainSet,
    net_cfg: FallNetConfig,
    train: &TrainConfig,
    thresholds: &ThresholdConfig,
    on_epoch: impl FnMut(&EpochReport),
) -> Result<Pretrained, PretrainError> {
    let mut net = FallNet::<f32>::new(net_cfg, train.seed)?;
    let epochs = fit(&mut net, &set.augmented, train, on_epoch)?;
    let state = initial_state(&net, &set.originals(), thresholds)?;
    Ok(Pretrained { net, state, epochs })
}

/// Reconstruction errors of held-out segments.
pub struct HeldOut {
    pub falls: Vec<f64>,
    pub benign: Vec<f64>,
}

impl HeldOut {
    pub fn auc(&self) -> f64 {
        crate::eval::roc_auc(&self.falls, &self.benign)
    }
}

/// Scores `traces` unseen benign traces and `traces` fall traces (each
/// holding every fall type, walking falls twice).
pub fn held_out_scores(net: &FallNet<f32>, traces: usize, seed: u64) -> Result<HeldOut, PretrainError> {
    let falls = [MotionKind::WalkFall, MotionKind::StopFall, MotionKind::SlowFall, MotionKind::WalkFall];
    let score = |segs: Vec<Emitted>| -> Result<Vec<f64>, PretrainError> {
        segs.iter()
            .map(|e| Ok(net.reconstruction_error(&Tensor3::from_segment(&e.segment).cast())?))
            .collect()
    };
    Ok(HeldOut {
        benign: score(simulate_segments(&MotionKind::BENIGN_FALL_LIKE, traces, seed, BENIGN_TEST_BASE)?)?,
        falls: score(simulate_segments(&falls, traces, seed, FALL_TEST_BASE)?)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_seeds_do_not_collide() {
        let a: Vec<u64> = (0..1000).map(|i| trace_seed(3, TRAIN_BASE, i)).collect();
        let b: Vec<u64> = (0..1000).map(|i| trace_seed(3, BENIGN_TEST_BASE, i)).collect();
        let c: Vec<u64> = (0..1000).map(|i| trace_seed(3, FALL_TEST_BASE, i)).collect();
        assert!(a.iter().all(|s| !b.contains(s) && !c.contains(s)));
        assert!(a.iter().all(|s| !(0..1000).any(|i| trace_seed(4, TRAIN_BASE, i) == *s)));
    }

    #[test]
    fn test_small_benign_set_is_augmented_24x() {
        let set = benign_set(1, 9, &AugmentPlan::default()).unwrap();
        assert!(!set.segments.is_empty());
        assert_eq!(set.augmented.len(), 24 * set.segments.len());
        let (c, f, _) = set.augmented[0].dims();
        assert_eq!((c, f), (3, 64));
    }
}
