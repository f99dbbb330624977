//! FallNet: variational convolutional autoencoder over variable-length spectrograms.
//!
//! Layout of one pass:
//!
//! ```text
//! x ─ instance norm (per antenna, unpadded extent) ─ zero-pad T ─┐
//!   encoder block × B: [conv3×3 → IN → LeakyReLU] × 2 → max-pool 2×2
//!   mean over time → FC → μ ‖ log σ²
//! z = μ + σ⊙ε
//!   FC → broadcast over time
//!   decoder block × B: up-pool (encoder indices) → [conv3×3 → IN → LeakyReLU] × 2
//!   conv3×3 → x̂ (cropped to the unpadded length)
//! ```
//!
//! The reconstruction target is the standardised input (before the learnable
//! affine), so both the output and the error are invariant to per-antenna
//! gain and offset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layers::{
    conv2d_same, conv2d_same_backward, gather_2x2, instance_norm, instance_norm_backward,
    leaky_relu, leaky_relu_backward, max_pool_2x2, up_pool_2x2, ConvRef, NormCache, PoolIndices,
};
use super::optim::Adam;
use super::tensor::{Real, Tensor3};
use super::FallNetError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallNetConfig {
    /// Frequency bins F of the input.
    pub freq_bins: usize,
    /// Antenna streams C.
    pub channels: usize,
    /// Latent dimension n.
    pub latent: usize,
    /// Output channels of each encoder block.
    pub widths: Vec<usize>,
    pub slope: f64,
    pub kl_weight: f64,
    pub norm_eps: f64,
    /// Stabiliser of the input standardisation; small enough that per-antenna
    /// affine invariance holds to round-off at any input scale.
    pub input_norm_eps: f64,
    /// Lowest frequency rows replaced by the mean of the remaining rows of
    /// their channel before standardisation (they carry the static component).
    pub dc_bins: usize,
}

impl Default for FallNetConfig {
    fn default() -> Self {
        Self {
            freq_bins: 64,
            channels: 3,
            latent: 32,
            widths: vec![8, 16, 32, 32],
            slope: 0.01,
            kl_weight: 1e-3,
            norm_eps: 1e-5,
            input_norm_eps: 1e-10,
            dc_bins: 2,
        }
    }
}

impl FallNetConfig {
    /// One block, F = 8, C = 1, n = 4: small enough for finite differences.
    pub fn tiny() -> Self {
        Self {
            freq_bins: 8,
            channels: 1,
            latent: 4,
            widths: vec![3],
            dc_bins: 0,
            ..Self::default()
        }
    }

    pub fn blocks(&self) -> usize {
        self.widths.len()
    }

    /// Time axis is padded to a multiple of this (one halving per block).
    pub fn time_multiple(&self) -> usize {
        1 << self.blocks()
    }

    pub fn padded_len(&self, t: usize) -> usize {
        let m = self.time_multiple();
        t.max(1).div_ceil(m) * m
    }

    fn bottleneck_freq(&self) -> usize {
        self.freq_bins >> self.blocks()
    }

    /// Width of the time-averaged feature vector fed to the FC layer.
    pub fn feature_len(&self) -> usize {
        self.bottleneck_freq() * self.widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), FallNetError> {
        let ok = !self.widths.is_empty()
            && self.widths.iter().all(|&w| w > 0)
            && self.channels > 0
            && self.latent > 0
            && self.freq_bins % self.time_multiple() == 0
            && self.freq_bins >= self.time_multiple()
            && self.norm_eps > 0.0
            && self.input_norm_eps > 0.0
            && self.dc_bins < self.freq_bins
            && self.slope.is_finite()
            && self.kl_weight >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(FallNetError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// Replaces rows `0..k` of every channel with the mean of its other rows.
/// Commutes with per-channel affine maps, so standardisation stays invariant.
pub fn suppress_low_bins<T: Real>(x: &Tensor3<T>, k: usize) -> Option<Tensor3<T>> {
    if k == 0 || k >= x.h {
        return None;
    }
    let mut out = x.clone();
    let rest = T::of(((x.h - k) * x.w) as f64);
    for c in 0..x.c {
        let start = x.idx(c, k, 0);
        let end = x.idx(c, x.h - 1, x.w - 1) + 1;
        let mean = x.data[start..end].iter().copied().sum::<T>() / rest;
        let base = x.idx(c, 0, 0);
        out.data[base..start].fill(mean);
    }
    Some(out)
}

/// A named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvSlot {
    w: usize,
    b: usize,
    co: usize,
    ci: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormSlot {
    g: usize,
    b: usize,
    c: usize,
}

#[derive(Debug, Clone, Copy)]
struct Stage {
    conv: ConvSlot,
    norm: NormSlot,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    out: usize,
    inp: usize,
}

#[derive(Debug, Clone)]
struct Arch {
    input_norm: NormSlot,
    enc: Vec<[Stage; 2]>,
    fc_enc: Dense,
    fc_dec: Dense,
    dec: Vec<[Stage; 2]>,
    out_conv: ConvSlot,
    entries: Vec<ParamEntry>,
    total: usize,
}

impl Arch {
    fn build(cfg: &FallNetConfig) -> Self {
        let mut entries = Vec::new();
        let mut total = 0;
        let mut alloc = |name: String, dims: Vec<usize>| {
            let len = dims.iter().product();
            let off = total;
            entries.push(ParamEntry {
                name,
                dims,
                offset: off,
                len,
            });
            total += len;
            off
        };
        let norm = |alloc: &mut dyn FnMut(String, Vec<usize>) -> usize, name: &str, c| NormSlot {
            g: alloc(format!("{name}.gamma"), vec![c]),
            b: alloc(format!("{name}.beta"), vec![c]),
            c,
        };
        let conv = |alloc: &mut dyn FnMut(String, Vec<usize>) -> usize, name: &str, co, ci| ConvSlot {
            w: alloc(format!("{name}.weight"), vec![co, ci, 3, 3]),
            b: alloc(format!("{name}.bias"), vec![co]),
            co,
            ci,
        };
        let input_norm = norm(&mut alloc, "input_norm", cfg.channels);
        let mut enc = Vec::new();
        let mut cin = cfg.channels;
        for (i, &w) in cfg.widths.iter().enumerate() {
            let a = Stage {
                conv: conv(&mut alloc, &format!("enc{i}.conv1"), w, cin),
                norm: norm(&mut alloc, &format!("enc{i}.norm1"), w),
            };
            let b = Stage {
                conv: conv(&mut alloc, &format!("enc{i}.conv2"), w, w),
                norm: norm(&mut alloc, &format!("enc{i}.norm2"), w),
            };
            enc.push([a, b]);
            cin = w;
        }
        let d = cfg.feature_len();
        let n2 = 2 * cfg.latent;
        let fc_enc = Dense {
            w: alloc("fc_enc.weight".into(), vec![n2, d]),
            b: alloc("fc_enc.bias".into(), vec![n2]),
            out: n2,
            inp: d,
        };
        let fc_dec = Dense {
            w: alloc("fc_dec.weight".into(), vec![d, cfg.latent]),
            b: alloc("fc_dec.bias".into(), vec![d]),
            out: d,
            inp: cfg.latent,
        };
        let mut dec: Vec<[Stage; 2]> = Vec::new();
        for i in (0..cfg.blocks()).rev() {
            let w = cfg.widths[i];
            let wo = if i > 0 { cfg.widths[i - 1] } else { w };
            let a = Stage {
                conv: conv(&mut alloc, &format!("dec{i}.conv1"), w, w),
                norm: norm(&mut alloc, &format!("dec{i}.norm1"), w),
            };
            let b = Stage {
                conv: conv(&mut alloc, &format!("dec{i}.conv2"), wo, w),
                norm: norm(&mut alloc, &format!("dec{i}.norm2"), wo),
            };
            dec.push([a, b]);
        }
        dec.reverse();
        let out_conv = conv(&mut alloc, "out_conv", cfg.channels, cfg.widths[0]);
        Self {
            input_norm,
            enc,
            fc_enc,
            fc_dec,
            dec,
            out_conv,
            entries,
            total,
        }
    }
}

/// Latent mean and log-variance; `σ = exp(½·logVar)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats<T> {
    pub mu: Vec<T>,
    pub logvar: Vec<T>,
}

impl<T: Real> LatentStats<T> {
    pub fn sigma(&self) -> Vec<T> {
        self.logvar.iter().map(|&l| (T::of(0.5) * l).exp()).collect()
    }

    /// `½ Σ (μ² + σ² − log σ² − 1)`, the KL divergence to 𝒩(0, I).
    pub fn kl(&self) -> f64 {
        kl_divergence(
            &self.mu.iter().map(|v| v.f64()).collect::<Vec<_>>(),
            &self.logvar.iter().map(|v| v.f64()).collect::<Vec<_>>(),
        )
    }
}

/// KL divergence of 𝒩(μ, diag(exp(logvar))) from 𝒩(0, I).
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, l)| m * m + l.exp() - l - 1.0)
        .sum::<f64>()
}

/// `z = μ + σ⊙ε`.
pub fn reparameterize<T: Real>(stats: &LatentStats<T>, noise: &[T]) -> Vec<T> {
    stats
        .mu
        .iter()
        .zip(stats.sigma())
        .zip(noise)
        .map(|((&m, s), &e)| m + s * e)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

/// Mean squared reconstruction error plus weighted KL.
pub fn loss<T: Real>(
    x: &Tensor3<T>,
    x_hat: &Tensor3<T>,
    stats: &LatentStats<T>,
    kl_weight: f64,
) -> Result<LossReport, FallNetError> {
    if x.dims() != x_hat.dims() {
        return Err(FallNetError::ShapeMismatch {
            expected: format!("{:?}", x.dims()),
            got: format!("{:?}", x_hat.dims()),
        });
    }
    let recon = x
        .data
        .iter()
        .zip(&x_hat.data)
        .map(|(a, b)| (a.f64() - b.f64()).powi(2))
        .sum::<f64>()
        / x.data.len() as f64;
    let kl = stats.kl();
    Ok(LossReport {
        recon,
        kl,
        total: recon + kl_weight * kl,
    })
}

#[derive(Debug, Clone)]
struct StageCache<T> {
    cols: Vec<T>,
    norm: NormCache<T>,
    /// Post-activation output (its sign drives the LeakyReLU backward).
    act: Tensor3<T>,
}

#[derive(Debug, Clone)]
struct EncBlockCache<T> {
    stages: [StageCache<T>; 2],
    pool: PoolIndices,
}

/// Everything `encode` produces; the decoder needs the pool indices and the
/// recorded time length.
#[derive(Debug, Clone)]
pub struct Encoded<T> {
    pub stats: LatentStats<T>,
    /// Standardised input over the unpadded extent (the reconstruction target).
    pub target: Tensor3<T>,
    /// Time bins before padding (the "time pad index").
    pub valid_t: usize,
    pub padded_t: usize,
    input_norm: NormCache<T>,
    blocks: Vec<EncBlockCache<T>>,
    features: Vec<T>,
    /// Time bins at the bottleneck.
    bottleneck_t: usize,
}

impl<T> Encoded<T> {
    /// Max-pool indices of every encoder block.
    pub fn pool_indices(&self) -> Vec<&PoolIndices> {
        self.blocks.iter().map(|b| &b.pool).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Decoded<T> {
    /// Full padded output.
    pub output: Tensor3<T>,
    valid_t: usize,
    z: Vec<T>,
    stages: Vec<[StageCache<T>; 2]>,
    out_cols: Vec<T>,
}

impl<T: Real> Decoded<T> {
    /// Output cropped to the unpadded input shape.
    pub fn reconstruction(&self) -> Tensor3<T> {
        self.output.with_width(self.valid_t)
    }
}

#[derive(Debug, Clone)]
pub struct FallNet<T> {
    cfg: FallNetConfig,
    arch: Arch,
    params: Vec<T>,
}

impl<T: Real> FallNet<T> {
    /// He-initialised convolutions, unit instance-norm gains, zero biases.
    pub fn new(cfg: FallNetConfig, seed: u64) -> Result<Self, FallNetError> {
        cfg.validate()?;
        let arch = Arch::build(&cfg);
        let mut params = vec![T::zero(); arch.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in &arch.entries {
            let slot = &mut params[e.offset..e.offset + e.len];
            if e.name.ends_with(".gamma") {
                slot.fill(T::one());
            } else if e.name.ends_with(".weight") {
                let fan_in: usize = e.dims[1..].iter().product();
                let std = if e.name.starts_with("fc") {
                    (1.0 / fan_in as f64).sqrt()
                } else {
                    (2.0 / fan_in as f64).sqrt()
                };
                for v in slot {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    *v = T::of(g * std);
                }
            }
        }
        Ok(Self { cfg, arch, params })
    }

    /// Rebuilds a network from a configuration and a flat parameter vector.
    pub fn from_params(cfg: FallNetConfig, params: Vec<T>) -> Result<Self, FallNetError> {
        cfg.validate()?;
        let arch = Arch::build(&cfg);
        if params.len() != arch.total {
            return Err(FallNetError::ShapeMismatch {
                expected: format!("{} parameters", arch.total),
                got: format!("{}", params.len()),
            });
        }
        Ok(Self { cfg, arch, params })
    }

    pub fn config(&self) -> &FallNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_entries(&self) -> &[ParamEntry] {
        &self.arch.entries
    }

    pub fn param_count(&self) -> usize {
        self.arch.total
    }

    /// Same network in another precision.
    pub fn cast<U: Real>(&self) -> FallNet<U> {
        FallNet {
            cfg: self.cfg.clone(),
            arch: self.arch.clone(),
            params: self.params.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    fn conv(&self, s: ConvSlot) -> ConvRef<'_, T> {
        ConvRef {
            weight: &self.params[s.w..s.w + s.co * s.ci * 9],
            bias: &self.params[s.b..s.b + s.co],
            out_channels: s.co,
            in_channels: s.ci,
        }
    }

    fn norm_params(&self, s: NormSlot) -> (&[T], &[T]) {
        (&self.params[s.g..s.g + s.c], &self.params[s.b..s.b + s.c])
    }

    fn eps(&self) -> T {
        T::of(self.cfg.norm_eps)
    }

    fn slope(&self) -> T {
        T::of(self.cfg.slope)
    }

    fn stage_forward(&self, x: &Tensor3<T>, st: Stage) -> Result<StageCache<T>, FallNetError> {
        let (y, cols) = conv2d_same(x, self.conv(st.conv))?;
        let (g, b) = self.norm_params(st.norm);
        let (mut act, norm) = instance_norm(&y, g, b, self.eps());
        leaky_relu(&mut act.data, self.slope());
        Ok(StageCache { cols, norm, act })
    }

    fn stage_backward(
        &self,
        mut dy: Tensor3<T>,
        cache: &StageCache<T>,
        st: Stage,
        grads: &mut [T],
    ) -> Tensor3<T> {
        leaky_relu_backward(&mut dy.data, &cache.act.data, self.slope());
        let (g, _) = self.norm_params(st.norm);
        let (dg, db) = split2(grads, st.norm.g, st.norm.b, st.norm.c);
        let dn = instance_norm_backward(&dy, &cache.norm, g, dg, db);
        let c = st.conv;
        let (dw, dbias) = split_pair(grads, c.w, c.co * c.ci * 9, c.b, c.co);
        conv2d_same_backward(&dn, &cache.cols, self.conv(c), dw, dbias)
    }

    fn check_input(&self, x: &Tensor3<T>) -> Result<(), FallNetError> {
        if x.c != self.cfg.channels || x.h != self.cfg.freq_bins || x.w == 0 {
            return Err(FallNetError::ShapeMismatch {
                expected: format!("{} × {} × T", self.cfg.channels, self.cfg.freq_bins),
                got: format!("{} × {} × {}", x.c, x.h, x.w),
            });
        }
        if !x.is_finite() {
            return Err(FallNetError::NonFinite);
        }
        Ok(())
    }

    /// Encoder pass of a `C × F × T` input (any `T ≥ 1`).
    pub fn encode(&self, x: &Tensor3<T>) -> Result<Encoded<T>, FallNetError> {
        self.check_input(x)?;
        let (g, b) = self.norm_params(self.arch.input_norm);
        let suppressed = suppress_low_bins(x, self.cfg.dc_bins);
        let x = suppressed.as_ref().unwrap_or(x);
        let (normed, input_norm) = instance_norm(x, g, b, T::of(self.cfg.input_norm_eps));
        let target = Tensor3::from_vec(x.c, x.h, x.w, input_norm.xhat.clone());
        let padded_t = self.cfg.padded_len(x.w);
        let mut h = normed.with_width(padded_t);
        let mut blocks = Vec::with_capacity(self.cfg.blocks());
        for st in &self.arch.enc {
            let a = self.stage_forward(&h, st[0])?;
            let b = self.stage_forward(&a.act, st[1])?;
            let (pooled, pool) = max_pool_2x2(&b.act)?;
            h = pooled;
            blocks.push(EncBlockCache {
                stages: [a, b],
                pool,
            });
        }
        let bt = h.w;
        let inv = T::one() / T::of(bt as f64);
        let features: Vec<T> = h
            .data
            .chunks(bt)
            .map(|row| row.iter().copied().sum::<T>() * inv)
            .collect();
        let fc = self.arch.fc_enc;
        let mut out = self.params[fc.b..fc.b + fc.out].to_vec();
        T::gemm(fc.out, fc.inp, 1, &self.params[fc.w..], false, &features, false, &mut out, true);
        let n = self.cfg.latent;
        Ok(Encoded {
            stats: LatentStats {
                mu: out[..n].to_vec(),
                logvar: out[n..].to_vec(),
            },
            target,
            valid_t: x.w,
            padded_t,
            input_norm,
            blocks,
            features,
            bottleneck_t: bt,
        })
    }

    /// Decoder pass from latent `z` using the paired encoder indices.
    pub fn decode(&self, z: &[T], enc: &Encoded<T>) -> Result<Decoded<T>, FallNetError> {
        if z.len() != self.cfg.latent {
            return Err(FallNetError::ShapeMismatch {
                expected: format!("latent {}", self.cfg.latent),
                got: format!("{}", z.len()),
            });
        }
        if enc.blocks.len() != self.cfg.blocks() {
            return Err(FallNetError::IndexMismatch {
                expected: self.cfg.blocks(),
                got: enc.blocks.len(),
            });
        }
        let fc = self.arch.fc_dec;
        let mut v = self.params[fc.b..fc.b + fc.out].to_vec();
        T::gemm(fc.out, fc.inp, 1, &self.params[fc.w..], false, z, false, &mut v, true);
        let wl = *self.cfg.widths.last().expect("validated");
        let bf = self.cfg.bottleneck_freq();
        let bt = enc.bottleneck_t;
        let mut h = Tensor3::zeros(wl, bf, bt);
        for (row, &val) in h.data.chunks_mut(bt).zip(&v) {
            row.fill(val);
        }
        let mut stages = Vec::with_capacity(self.cfg.blocks());
        for (i, st) in self.arch.dec.iter().enumerate().rev() {
            let up = up_pool_2x2(&h, &enc.blocks[i].pool)?;
            let a = self.stage_forward(&up, st[0])?;
            let b = self.stage_forward(&a.act, st[1])?;
            h = b.act.clone();
            stages.push([a, b]);
        }
        stages.reverse();
        let (output, out_cols) = conv2d_same(&h, self.conv(self.arch.out_conv))?;
        Ok(Decoded {
            output,
            valid_t: enc.valid_t,
            z: z.to_vec(),
            stages,
            out_cols,
        })
    }

    /// Accumulates `scale · ∂(recon + w·KL)/∂θ` into `grads` and returns the loss.
    fn backward(
        &self,
        enc: &Encoded<T>,
        dec: &Decoded<T>,
        noise: &[T],
        scale: T,
        grads: &mut [T],
    ) -> LossReport {
        let (c, f, tv, tp) = (self.cfg.channels, self.cfg.freq_bins, enc.valid_t, enc.padded_t);
        let n_valid = (c * f * tv) as f64;
        let mut recon = 0.0;
        let mut d_out = Tensor3::zeros(c, f, tp);
        let k = scale * T::of(2.0 / n_valid);
        for ch in 0..c {
            for y in 0..f {
                for x in 0..tv {
                    let diff = dec.output.at(ch, y, x) - enc.target.at(ch, y, x);
                    recon += diff.f64() * diff.f64();
                    let i = d_out.idx(ch, y, x);
                    d_out.data[i] = k * diff;
                }
            }
        }
        recon /= n_valid;
        let kl = enc.stats.kl();

        // Decoder.
        let oc = self.arch.out_conv;
        let (dw, db) = split_pair(grads, oc.w, oc.co * oc.ci * 9, oc.b, oc.co);
        let mut dh = conv2d_same_backward(&d_out, &dec.out_cols, self.conv(oc), dw, db);
        for (i, st) in self.arch.dec.iter().enumerate() {
            dh = self.stage_backward(dh, &dec.stages[i][1], st[1], grads);
            dh = self.stage_backward(dh, &dec.stages[i][0], st[0], grads);
            dh = gather_2x2(&dh, &enc.blocks[i].pool);
        }
        let dv: Vec<T> = dh.data.chunks(enc.bottleneck_t).map(|r| r.iter().copied().sum()).collect();
        let fc = self.arch.fc_dec;
        {
            let (dw, db) = split_pair(grads, fc.w, fc.out * fc.inp, fc.b, fc.out);
            T::gemm(fc.out, 1, fc.inp, &dv, false, &dec.z, false, dw, true);
            db.iter_mut().zip(&dv).for_each(|(a, b)| *a += *b);
        }
        let mut dz = vec![T::zero(); fc.inp];
        T::gemm(fc.inp, fc.out, 1, &self.params[fc.w..], true, &dv, false, &mut dz, false);

        // Bottleneck: z = μ + σ·ε plus the KL term.
        let n = self.cfg.latent;
        let w = scale * T::of(self.cfg.kl_weight);
        let half = T::of(0.5);
        let mut dstats = vec![T::zero(); 2 * n];
        for i in 0..n {
            let (mu, lv) = (enc.stats.mu[i], enc.stats.logvar[i]);
            let sigma = (half * lv).exp();
            dstats[i] = dz[i] + w * mu;
            dstats[n + i] = dz[i] * noise[i] * half * sigma + w * half * (sigma * sigma - T::one());
        }

        // Encoder.
        let fc = self.arch.fc_enc;
        {
            let (dw, db) = split_pair(grads, fc.w, fc.out * fc.inp, fc.b, fc.out);
            T::gemm(fc.out, 1, fc.inp, &dstats, false, &enc.features, false, dw, true);
            db.iter_mut().zip(&dstats).for_each(|(a, b)| *a += *b);
        }
        let mut dfeat = vec![T::zero(); fc.inp];
        T::gemm(fc.inp, fc.out, 1, &self.params[fc.w..], true, &dstats, false, &mut dfeat, false);
        let wl = *self.cfg.widths.last().expect("validated");
        let bt = enc.bottleneck_t;
        let inv = T::one() / T::of(bt as f64);
        let mut dh = Tensor3::zeros(wl, self.cfg.bottleneck_freq(), bt);
        for (row, &g) in dh.data.chunks_mut(bt).zip(&dfeat) {
            row.fill(g * inv);
        }
        for (i, st) in self.arch.enc.iter().enumerate().rev() {
            let blk = &enc.blocks[i];
            dh = up_pool_2x2(&dh, &blk.pool).expect("indices from the paired forward pass");
            dh = self.stage_backward(dh, &blk.stages[1], st[1], grads);
            dh = self.stage_backward(dh, &blk.stages[0], st[0], grads);
        }
        let du = dh.with_width(tv);
        let s = self.arch.input_norm;
        let (g, _) = self.norm_params(s);
        let (dg, db) = split2(grads, s.g, s.b, s.c);
        instance_norm_backward(&du, &enc.input_norm, g, dg, db);

        LossReport {
            recon,
            kl,
            total: recon + self.cfg.kl_weight * kl,
        }
    }

    /// Loss and gradient for one sample with caller-supplied ε.
    pub fn loss_and_grad(
        &self,
        x: &Tensor3<T>,
        noise: &[T],
        grads: &mut [T],
    ) -> Result<LossReport, FallNetError> {
        self.loss_and_grad_scaled(x, noise, T::one(), grads)
    }

    fn loss_and_grad_scaled(
        &self,
        x: &Tensor3<T>,
        noise: &[T],
        scale: T,
        grads: &mut [T],
    ) -> Result<LossReport, FallNetError> {
        assert_eq!(grads.len(), self.arch.total);
        let enc = self.encode(x)?;
        let z = reparameterize(&enc.stats, noise);
        let dec = self.decode(&z, &enc)?;
        Ok(self.backward(&enc, &dec, noise, scale, grads))
    }

    /// Forward-only loss for a given ε.
    pub fn loss_with_noise(&self, x: &Tensor3<T>, noise: &[T]) -> Result<LossReport, FallNetError> {
        let enc = self.encode(x)?;
        let z = reparameterize(&enc.stats, noise);
        let dec = self.decode(&z, &enc)?;
        loss(&enc.target, &dec.reconstruction(), &enc.stats, self.cfg.kl_weight)
    }

    /// Max-pool argmax positions of every encoder block for input `x`.
    pub fn pool_routing(&self, x: &Tensor3<T>) -> Result<Vec<PoolIndices>, FallNetError> {
        Ok(self.encode(x)?.blocks.into_iter().map(|b| b.pool).collect())
    }

    /// Deterministic reconstruction (`z = μ`) cropped to the input length.
    pub fn reconstruct(&self, x: &Tensor3<T>) -> Result<(Tensor3<T>, Encoded<T>), FallNetError> {
        let enc = self.encode(x)?;
        let dec = self.decode(&enc.stats.mu.clone(), &enc)?;
        Ok((dec.reconstruction(), enc))
    }

    /// Length-normalised L2 distance (RMS) between the standardised input and
    /// its reconstruction at `z = μ`.
    pub fn reconstruction_error(&self, x: &Tensor3<T>) -> Result<f64, FallNetError> {
        Ok(self.score(x)?.0)
    }

    /// Reconstruction error together with the latent mean.
    pub fn score(&self, x: &Tensor3<T>) -> Result<(f64, Vec<f64>), FallNetError> {
        let (rec, enc) = self.reconstruct(x)?;
        let sq: f64 = rec
            .data
            .iter()
            .zip(&enc.target.data)
            .map(|(a, b)| (a.f64() - b.f64()).powi(2))
            .sum();
        let mu = enc.stats.mu.iter().map(|v| v.f64()).collect();
        Ok(((sq / rec.data.len() as f64).sqrt(), mu))
    }

    /// One Adam step on the mean loss over `batch`, sampling ε from `rng`.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &[Tensor3<T>],
        opt: &mut Adam<T>,
        rng: &mut R,
    ) -> Result<LossReport, FallNetError> {
        if batch.is_empty() {
            return Err(FallNetError::EmptyBatch);
        }
        let mut grads = vec![T::zero(); self.arch.total];
        let scale = T::one() / T::of(batch.len() as f64);
        let mut report = LossReport {
            recon: 0.0,
            kl: 0.0,
            total: 0.0,
        };
        for x in batch {
            let noise: Vec<T> = (0..self.cfg.latent)
                .map(|_| T::of(StandardNormal.sample(&mut *rng)))
                .collect();
            let r = self.loss_and_grad_scaled(x, &noise, scale, &mut grads)?;
            report.recon += r.recon / batch.len() as f64;
            report.kl += r.kl / batch.len() as f64;
            report.total += r.total / batch.len() as f64;
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(FallNetError::NonFiniteGradient);
        }
        opt.step(&mut self.params, &grads);
        Ok(report)
    }
}

fn split2<T>(grads: &mut [T], a: usize, b: usize, len: usize) -> (&mut [T], &mut [T]) {
    split_pair(grads, a, len, b, len)
}

/// Two disjoint mutable sub-slices `[a, a+la)` and `[b, b+lb)` with `a < b`.
fn split_pair<T>(grads: &mut [T], a: usize, la: usize, b: usize, lb: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(a + la <= b);
    let (lo, hi) = grads.split_at_mut(b);
    (&mut lo[a..a + la], &mut hi[..lb])
}
