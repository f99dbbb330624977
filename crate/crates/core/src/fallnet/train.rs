//! Mini-batch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Adam, FallNet, FallNetError, Real, Tensor3};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 8,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_recon: f64,
}

/// Shuffled mini-batch Adam over `data` for `cfg.epochs` epochs.
pub fn fit<T: Real>(
    net: &mut FallNet<T>,
    data: &[Tensor3<T>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Vec<EpochReport>, FallNetError> {
    if data.is_empty() {
        return Err(FallNetError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(net.param_count(), cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss, mut recon, mut n) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i].clone()));
            let r = net.train_step(&batch, &mut opt, &mut rng)?;
            loss += r.total * chunk.len() as f64;
            recon += r.recon * chunk.len() as f64;
            n += chunk.len();
        }
        let rep = EpochReport {
            epoch,
            mean_loss: loss / n as f64,
            mean_recon: recon / n as f64,
        };
        on_epoch(&rep);
        reports.push(rep);
    }
    Ok(reports)
}

/// `steps` Adam steps on one fixed batch with a fresh optimizer state.
pub fn retrain<T: Real>(
    net: &mut FallNet<T>,
    batch: &[Tensor3<T>],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<f64, FallNetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(net.param_count(), lr);
    let mut last = f64::NAN;
    for _ in 0..steps {
        last = net.train_step(batch, &mut opt, &mut rng)?.total;
    }
    Ok(last)
}
