//! Layer primitives with explicit backward passes.

use super::tensor::{Real, Tensor3};
use super::FallNetError;

pub const KERNEL: usize = 3;
const K2: usize = KERNEL * KERNEL;

/// 3×3 convolution weights `[out][in][ky][kx]` with one bias per filter.
#[derive(Debug, Clone, Copy)]
pub struct ConvRef<'a, T> {
    pub weight: &'a [T],
    pub bias: &'a [T],
    pub out_channels: usize,
    pub in_channels: usize,
}

/// Output size of a convolution: `⌊(n + 2p − k)/s⌋ + 1`.
pub fn conv_output_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Unfolds 3×3 neighbourhoods (zero outside) into a `(C·9) × (H·W)` matrix.
pub fn im2col<T: Real>(x: &Tensor3<T>) -> Vec<T> {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let mut cols = vec![T::zero(); x.c * K2 * hw];
    for c in 0..x.c {
        let plane = x.plane(c);
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[(c * K2 + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    // x offset: dst[x] = src[x + kx - 1]
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
pub fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize) -> Tensor3<T> {
    let hw = h * w;
    let mut out = Tensor3::zeros(c, h, w);
    for ch in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[(ch * K2 + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + sy as usize) * w;
                    let src = &row[y * w..][..w];
                    let dst = &mut out.data[base..base + w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += *s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += *s),
                    }
                }
            }
        }
    }
    out
}

/// Same-padded 3×3 convolution (stride 1, padding 1). Returns the output and
/// the unfolded input for the backward pass.
pub fn conv2d_same<T: Real>(
    x: &Tensor3<T>,
    layer: ConvRef<'_, T>,
) -> Result<(Tensor3<T>, Vec<T>), FallNetError> {
    if x.c != layer.in_channels {
        return Err(FallNetError::ChannelMismatch {
            expected: layer.in_channels,
            got: x.c,
        });
    }
    let hw = x.h * x.w;
    let cols = im2col(x);
    let mut y = Tensor3::zeros(layer.out_channels, x.h, x.w);
    for (o, b) in layer.bias.iter().enumerate() {
        y.data[o * hw..(o + 1) * hw].fill(*b);
    }
    T::gemm(
        layer.out_channels,
        x.c * K2,
        hw,
        layer.weight,
        false,
        &cols,
        false,
        &mut y.data,
        true,
    );
    Ok((y, cols))
}

/// Backward of [`conv2d_same`]: accumulates weight/bias gradients and returns `dL/dx`.
pub fn conv2d_same_backward<T: Real>(
    dy: &Tensor3<T>,
    cols: &[T],
    layer: ConvRef<'_, T>,
    dweight: &mut [T],
    dbias: &mut [T],
) -> Tensor3<T> {
    let hw = dy.h * dy.w;
    let k = layer.in_channels * K2;
    for (o, db) in dbias.iter_mut().enumerate() {
        *db += dy.data[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
    }
    T::gemm(layer.out_channels, hw, k, &dy.data, false, cols, true, dweight, true);
    let mut dcols = vec![T::zero(); k * hw];
    T::gemm(k, layer.out_channels, hw, layer.weight, true, &dy.data, false, &mut dcols, false);
    col2im(&dcols, layer.in_channels, dy.h, dy.w)
}

/// Per-channel statistics kept for the instance-norm backward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Instance normalisation over each channel's `H × W` extent with a learnable affine.
pub fn instance_norm<T: Real>(
    x: &Tensor3<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Tensor3<T>, NormCache<T>) {
    let n = x.h * x.w;
    let nf = T::of(n as f64);
    let mut y = Tensor3::zeros(x.c, x.h, x.w);
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut inv_std = vec![T::zero(); x.c];
    for c in 0..x.c {
        let p = x.plane(c);
        let mean = p.iter().copied().sum::<T>() / nf;
        let var = p.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let is = T::one() / (var + eps).sqrt();
        inv_std[c] = is;
        for i in 0..n {
            let xh = (p[i] - mean) * is;
            xhat[c * n + i] = xh;
            y.data[c * n + i] = gamma[c] * xh + beta[c];
        }
    }
    (y, NormCache { xhat, inv_std })
}

/// Backward of [`instance_norm`].
pub fn instance_norm_backward<T: Real>(
    dy: &Tensor3<T>,
    cache: &NormCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor3<T> {
    let n = dy.h * dy.w;
    let nf = T::of(n as f64);
    let mut dx = Tensor3::zeros(dy.c, dy.h, dy.w);
    for c in 0..dy.c {
        let g = &dy.data[c * n..(c + 1) * n];
        let xh = &cache.xhat[c * n..(c + 1) * n];
        let (mut sg, mut sgx) = (T::zero(), T::zero());
        for i in 0..n {
            sg += g[i];
            sgx += g[i] * xh[i];
        }
        dgamma[c] += sgx;
        dbeta[c] += sg;
        let k = gamma[c] * cache.inv_std[c] / nf;
        for i in 0..n {
            dx.data[c * n + i] = k * (nf * g[i] - sg - xh[i] * sgx);
        }
    }
    dx
}

pub fn leaky_relu<T: Real>(x: &mut [T], slope: T) {
    for v in x {
        if *v < T::zero() {
            *v *= slope;
        }
    }
}

/// Backward of [`leaky_relu`] given the activation's output `y` (same sign as its input).
pub fn leaky_relu_backward<T: Real>(dy: &mut [T], y: &[T], slope: T) {
    for (g, v) in dy.iter_mut().zip(y) {
        if *v < T::zero() {
            *g *= slope;
        }
    }
}

/// Position of the maximum inside each 2×2 window, row-major (0 = top-left,
/// 3 = bottom-right); ties resolve to the first maximum.
pub type PoolIndices = Vec<u8>;

pub fn max_pool_2x2<T: Real>(x: &Tensor3<T>) -> Result<(Tensor3<T>, PoolIndices), FallNetError> {
    if x.h % 2 != 0 || x.w % 2 != 0 {
        return Err(FallNetError::OddPoolDims { h: x.h, w: x.w });
    }
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut y = Tensor3::zeros(x.c, h2, w2);
    let mut idx = vec![0u8; x.c * h2 * w2];
    for c in 0..x.c {
        for i in 0..h2 {
            for j in 0..w2 {
                let mut best = x.at(c, 2 * i, 2 * j);
                let mut arg = 0u8;
                for k in 1..4u8 {
                    let v = x.at(c, 2 * i + (k as usize >> 1), 2 * j + (k as usize & 1));
                    if v > best {
                        best = v;
                        arg = k;
                    }
                }
                let o = y.idx(c, i, j);
                y.data[o] = best;
                idx[o] = arg;
            }
        }
    }
    Ok((y, idx))
}

/// Places each pooled value back at its stored argmax position; zeros elsewhere.
pub fn up_pool_2x2<T: Real>(y: &Tensor3<T>, idx: &[u8]) -> Result<Tensor3<T>, FallNetError> {
    if idx.len() != y.data.len() {
        return Err(FallNetError::IndexMismatch {
            expected: y.data.len(),
            got: idx.len(),
        });
    }
    let mut x = Tensor3::zeros(y.c, 2 * y.h, 2 * y.w);
    for c in 0..y.c {
        for i in 0..y.h {
            for j in 0..y.w {
                let o = y.idx(c, i, j);
                let k = idx[o] as usize;
                let t = x.idx(c, 2 * i + (k >> 1), 2 * j + (k & 1));
                x.data[t] = y.data[o];
            }
        }
    }
    Ok(x)
}

/// Adjoint of [`up_pool_2x2`] (also the backward of [`max_pool_2x2`] read
/// the other way round): gathers the values at the stored positions.
pub fn gather_2x2<T: Real>(x: &Tensor3<T>, idx: &[u8]) -> Tensor3<T> {
    let mut y = Tensor3::zeros(x.c, x.h / 2, x.w / 2);
    for c in 0..y.c {
        for i in 0..y.h {
            for j in 0..y.w {
                let o = y.idx(c, i, j);
                let k = idx[o] as usize;
                y.data[o] = x.at(c, 2 * i + (k >> 1), 2 * j + (k & 1));
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor3<f64> {
        Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn naive_conv(x: &Tensor3<f64>, w: &[f64], b: &[f64], co: usize) -> Tensor3<f64> {
        let mut y = Tensor3::zeros(co, x.h, x.w);
        for o in 0..co {
            for i in 0..x.h as isize {
                for j in 0..x.w as isize {
                    let mut acc = b[o];
                    for c in 0..x.c {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (si, sj) = (i + ky - 1, j + kx - 1);
                                if si < 0 || sj < 0 || si >= x.h as isize || sj >= x.w as isize {
                                    continue;
                                }
                                let wi = ((o * x.c + c) * 3 + ky as usize) * 3 + kx as usize;
                                acc += w[wi] * x.at(c, si as usize, sj as usize);
                            }
                        }
                    }
                    let idx = y.idx(o, i as usize, j as usize);
                    y.data[idx] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn test_conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 1, 6, 7);
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let layer = ConvRef {
            weight: &w,
            bias: &[0.0],
            out_channels: 1,
            in_channels: 1,
        };
        assert_eq!(conv2d_same(&x, layer).unwrap().0, x);
    }

    #[test]
    fn test_conv_same_shape_and_formula() {
        let x = Tensor3::<f64>::zeros(3, 64, 37);
        let w = vec![0.1; 8 * 3 * 9];
        let layer = ConvRef {
            weight: &w,
            bias: &[0.0; 8],
            out_channels: 8,
            in_channels: 3,
        };
        let (y, _) = conv2d_same(&x, layer).unwrap();
        assert_eq!(y.dims(), (8, 64, 37));
        for n in 1..100 {
            assert_eq!(conv_output_len(n, 3, 1, 1), n);
        }
    }

    #[test]
    fn test_conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 1, 5, 5);
        let w: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let layer = ConvRef {
            weight: &w,
            bias: &[0.3],
            out_channels: 1,
            in_channels: 1,
        };
        let (y, _) = conv2d_same(&x, layer).unwrap();
        let r = naive_conv(&x, &w, &[0.3], 1);
        for (a, b) in y.data.iter().zip(&r.data) {
            assert!((a - b).abs() < 1e-12);
        }
        // Multi-channel as well.
        let x = random(&mut rng, 3, 4, 6);
        let w: Vec<f64> = (0..2 * 3 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let layer = ConvRef {
            weight: &w,
            bias: &[0.1, -0.2],
            out_channels: 2,
            in_channels: 3,
        };
        let (y, _) = conv2d_same(&x, layer).unwrap();
        let r = naive_conv(&x, &w, &[0.1, -0.2], 2);
        for (a, b) in y.data.iter().zip(&r.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn test_conv_channel_mismatch() {
        let x = Tensor3::<f64>::zeros(2, 4, 4);
        let layer = ConvRef {
            weight: &[0.0; 9],
            bias: &[0.0],
            out_channels: 1,
            in_channels: 1,
        };
        assert!(matches!(
            conv2d_same(&x, layer),
            Err(FallNetError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn test_col2im_is_adjoint() {
        // <im2col(x), c> == <x, col2im(c)>
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 2, 5, 4);
        let cols = im2col(&x);
        let c: Vec<f64> = (0..cols.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let back = col2im(&c, 2, 5, 4);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn test_instance_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 2, 4, 6);
        let (y, _) = instance_norm(&x, &[1.0, 1.0], &[0.0, 0.0], 1e-5);
        for c in 0..2 {
            let p = y.plane(c);
            let m = p.iter().sum::<f64>() / 24.0;
            let v = p.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 24.0;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-4);
            // Against directly computed statistics of the input channel.
            let xp = x.plane(c);
            let xm = xp.iter().sum::<f64>() / 24.0;
            let xv = xp.iter().map(|a| (a - xm).powi(2)).sum::<f64>() / 24.0;
            for (a, b) in p.iter().zip(xp) {
                assert!((a - (b - xm) / (xv + 1e-5).sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn test_instance_norm_constant_channel_is_zero() {
        let x = Tensor3::from_vec(1, 2, 3, vec![4.2; 6]);
        let (y, _) = instance_norm(&x, &[1.0], &[0.0], 1e-5);
        assert!(y.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn test_instance_norm_affine_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = random(&mut rng, 2, 8, 8);
        x.data.iter_mut().for_each(|v| *v *= 10.0);
        let mut x2 = x.clone();
        x2.data.iter_mut().for_each(|v| *v = 5.0 * *v + 7.0);
        let (a, _) = instance_norm(&x, &[1.3, 0.7], &[0.2, -0.1], 1e-5);
        let (b, _) = instance_norm(&x2, &[1.3, 0.7], &[0.2, -0.1], 1e-5);
        for (p, q) in a.data.iter().zip(&b.data) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn test_leaky_relu_values_and_gradient() {
        let mut v = vec![2.0, -2.0];
        leaky_relu(&mut v, 0.01);
        assert_eq!(v, vec![2.0, -0.02]);
        let f = |x: f64| if x >= 0.0 { x } else { 0.01 * x };
        let h = 1e-6;
        let fd = (f(-1.0 + h) - f(-1.0 - h)) / (2.0 * h);
        let mut g = vec![1.0];
        leaky_relu_backward(&mut g, &[-0.01], 0.01);
        assert!((g[0] - fd).abs() < 1e-9);
    }

    #[test]
    fn test_pool_example_window() {
        let x = Tensor3::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let (y, idx) = max_pool_2x2(&x).unwrap();
        assert_eq!(y.data, vec![4.0]);
        assert_eq!(idx, vec![3]);
        assert_eq!(up_pool_2x2(&y, &idx).unwrap().data, vec![0.0, 0.0, 0.0, 4.0]);
        let eq = Tensor3::from_vec(1, 2, 2, vec![5.0; 4]);
        assert_eq!(max_pool_2x2(&eq).unwrap().1, vec![0]);
    }

    #[test]
    fn test_pool_odd_dims_rejected() {
        let x = Tensor3::<f64>::zeros(1, 3, 4);
        assert!(matches!(max_pool_2x2(&x), Err(FallNetError::OddPoolDims { .. })));
    }

    #[test]
    fn test_pool_unpool_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            // Non-negative, like magnitudes: a negative window maximum would lose
            // to the zeros up-pooling writes around it.
            let mut x = random(&mut rng, 2, 8, 8);
            x.data.iter_mut().for_each(|v| *v = v.abs() + 1e-3);
            let (y, idx) = max_pool_2x2(&x).unwrap();
            let u = up_pool_2x2(&y, &idx).unwrap();
            let (y2, idx2) = max_pool_2x2(&u).unwrap();
            assert_eq!(y, y2);
            assert_eq!(idx, idx2);
            assert_eq!(gather_2x2(&u, &idx), y);
        }
    }
}
