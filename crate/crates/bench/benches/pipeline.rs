use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sifall_core::corpus::CALIBRATION_S;
use sifall_core::dsp::{ridge_path, segment_stream, stft, FrontendConfig, Spectrogram, Stft, StftConfig};
use sifall_core::fallnet::Adam;
use sifall_core::{FallNet, FallNetConfig};

fn frontend(c: &mut Criterion) {
    let d = sifall_bench::dynamics();
    let calib = FrontendConfig::calibrate(&d.slice(0, d.index_of(CALIBRATION_S))).unwrap();
    let plan = Stft::new(StftConfig::SEGMENT);
    c.bench_function("stft_3s_segment", |b| b.iter(|| stft(black_box(&d), 6.0, 9.0, &plan).unwrap()));
    c.bench_function("segment_stream_trace", |b| {
        b.iter(|| segment_stream(black_box(&d), &calib, "bench").count())
    });
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = Spectrogram {
        bins: 64,
        frames: 400,
        data: (0..64 * 400).map(|_| rng.gen_range(0.0..1.0)).collect(),
    };
    let floor = vec![0.2; 64];
    c.bench_function("ridge_path_64x400", |b| b.iter(|| ridge_path(black_box(&spec), &floor)));
}

fn model(c: &mut Criterion) {
    let em = sifall_bench::emitted();
    let x = sifall_bench::tensor(&em);
    let mut net = FallNet::<f32>::new(FallNetConfig::default(), 1).unwrap();
    c.bench_function("fallnet_score", |b| b.iter(|| net.score(black_box(&x)).unwrap()));
    let batch = vec![x.clone(); 8];
    let mut opt = Adam::new(net.param_count(), 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    c.bench_function("fallnet_train_step_batch8", |b| {
        b.iter(|| net.train_step(black_box(&batch), &mut opt, &mut rng).unwrap())
    });
}

criterion_group!(benches, frontend, model);
criterion_main!(benches);
