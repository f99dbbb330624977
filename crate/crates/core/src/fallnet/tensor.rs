//! Minimal dense tensors and the scalar abstraction the network is generic over.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Floating-point scalar with a GEMM kernel.
pub trait Real:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    /// `c = a·b (+ c if accumulate)` with `a: m×k`, `b: k×n`, all row-major,
    /// either operand optionally transposed in storage.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserted slice lengths cover every index reachable
                // from the given strides and dimensions.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f64, matrixmultiply::dgemm);
impl_real!(f32, matrixmultiply::sgemm);

/// Rank-3 tensor `channels × height × width`, row-major (width fastest).
///
/// Spectrogram segments map to `C × F × T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor3<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length mismatch");
        Self { c, h, w, data }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Zero-pads (or crops) the width axis to `w`.
    pub fn with_width(&self, w: usize) -> Self {
        let mut out = Self::zeros(self.c, self.h, w);
        let keep = w.min(self.w);
        for c in 0..self.c {
            for y in 0..self.h {
                let src = self.idx(c, y, 0);
                let dst = out.idx(c, y, 0);
                out.data[dst..dst + keep].copy_from_slice(&self.data[src..src + keep]);
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Tensor3<U> {
        Tensor3 {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

impl Tensor3<f64> {
    /// `F × T × C` segment tensor to `C × F × T`.
    pub fn from_segment(seg: &crate::dsp::SpectroSegment) -> Self {
        let mut out = Self::zeros(seg.c, seg.f, seg.t);
        for f in 0..seg.f {
            for t in 0..seg.t {
                for c in 0..seg.c {
                    let i = out.idx(c, f, t);
                    out.data[i] = seg.get(f, t, c);
                }
            }
        }
        out
    }

    /// `C × F × T` back to an `F × T × C` segment with segment-STFT metadata
    /// at the default sample rate.
    pub fn to_segment(&self) -> crate::dsp::SpectroSegment {
        let cfg = crate::dsp::StftConfig::SEGMENT;
        let fs = crate::sim::DEFAULT_SAMPLE_RATE_HZ;
        let mut seg = crate::dsp::SpectroSegment {
            f: self.h,
            t: self.w,
            c: self.c,
            tensor: vec![0.0; self.data.len()],
            hop_s: cfg.hop as f64 / fs,
            freq_res_hz: cfg.freq_res_hz(fs),
            t_start: 0.0,
            t_end: 0.0,
            source_trace: String::new(),
        };
        for c in 0..self.c {
            for f in 0..self.h {
                for t in 0..self.w {
                    let i = seg.index(f, t, c);
                    seg.tensor[i] = self.at(c, f, t);
                }
            }
        }
        seg
    }
}
