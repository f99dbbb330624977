#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sifall_core::fallnet::{fit, FallNet, Tensor3, TrainConfig};
use sifall_core::{DetectorState, DynamicsSeries};
use sifall_gateway::envelope::FRONTEND_VERSION;
use sifall_gateway::{DataDir, SegmentEnvelope, Settings};

pub const C: usize = 3;
pub const F: usize = 64;

pub fn settings() -> Settings {
    Settings {
        latent: 4,
        widths: vec![2, 4],
        buffer_capacity: 6,
        retrain_steps: 2,
        fsync: false,
        seed: 5,
        ..Settings::default()
    }
}

/// Smooth ridge with jitter; `wild` adds broadband noise.
pub fn tensor(seed: u64, wild: bool) -> Tensor3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = 32;
    let ridge: f64 = rng.gen_range(12.0..14.0);
    let mut x = Tensor3::zeros(C, F, t);
    for c in 0..C {
        for f in 0..F {
            for k in 0..t {
                let d = f as f64 - ridge - 0.3 * k as f64;
                let mut v = (-d * d / 8.0).exp() + 0.05 * rng.gen::<f64>();
                if wild {
                    v += rng.gen::<f64>();
                }
                let i = x.idx(c, f, k);
                x.data[i] = v as f32;
            }
        }
    }
    x
}

pub fn envelope(id: u64, wild: bool) -> SegmentEnvelope {
    let mut rng = ChaCha8Rng::seed_from_u64(id ^ 0xD1);
    let streams = (0..C).map(|_| (0..400).map(|_| 1.0 + 0.1 * rng.gen::<f64>()).collect()).collect();
    let mut dynamics = DynamicsSeries::new(streams, 200.0);
    dynamics.t0 = id as f64 * 10.0;
    let env = SegmentEnvelope {
        trace_id: "t0".into(),
        segment_id: id,
        t_start: id as f64 * 10.0,
        t_end: id as f64 * 10.0 + 2.0,
        frontend_version: FRONTEND_VERSION.into(),
        tensor: tensor(id, wild),
        dynamics: Some(dynamics),
    };
    // Round-trip so the in-memory value equals what the wire would deliver.
    let (h, b) = (env.headers(), env.body());
    SegmentEnvelope::from_parts(|k| h.iter().find(|(n, _)| *n == k).map(|(_, v)| v.as_str()), &b).unwrap()
}

/// A data directory whose thresholds put smooth inputs near α and noisy
/// ones above 2α.
pub fn data_dir(root: &std::path::Path, settings: &Settings) -> DataDir {
    let mut net = FallNet::<f32>::new(settings.net_config(C, F), 1).unwrap();
    let smooth: Vec<Tensor3<f32>> = (2000..2064).map(|s| tensor(s, false)).collect();
    let cfg = TrainConfig {
        epochs: 12,
        batch_size: 8,
        lr: 1e-2,
        seed: 1,
    };
    fit(&mut net, &smooth, &cfg, |_| {}).unwrap();
    let errors: Vec<f64> = (1000..1040).map(|s| net.reconstruction_error(&tensor(s, false)).unwrap()).collect();
    let state = DetectorState::from_errors(&errors, &settings.thresholds()).unwrap();
    let dir = DataDir::new(root);
    dir.initialise(&net, &state, settings).unwrap();
    dir
}

/// Deterministic mix: every fifth segment is noisy.
pub fn stream(n: u64) -> Vec<SegmentEnvelope> {
    (1..=n).map(|i| envelope(i, i % 5 == 0)).collect()
}
