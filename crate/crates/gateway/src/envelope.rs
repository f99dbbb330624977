//! Segment envelopes on the wire.
//!
//! The request body is an `SFT1` tensor of shape `[C, F, T]`, optionally
//! followed by a second `SFT1` tensor `[C, N]` holding the `S(t)` samples the
//! segment was computed from (used for noise augmentation on retraining).
//! Metadata travels in `x-sifall-*` headers.

use sifall_core::fallnet::{encode_tensor, split_tensor, Tensor3};
use sifall_core::online::Sample;
use sifall_core::DynamicsSeries;

use crate::GatewayError;

pub const H_TRACE: &str = "x-sifall-trace-id";
pub const H_SEGMENT: &str = "x-sifall-segment-id";
pub const H_T_START: &str = "x-sifall-t-start";
pub const H_T_END: &str = "x-sifall-t-end";
pub const H_FRONTEND: &str = "x-sifall-frontend-version";
pub const H_FS: &str = "x-sifall-sample-rate";
pub const H_DYN_T0: &str = "x-sifall-dynamics-t0";

pub const FRONTEND_VERSION: &str = concat!("sifall-frontend/", env!("CARGO_PKG_VERSION"));

/// Longest accepted segment, in STFT frames.
pub const MAX_FRAMES: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentEnvelope {
    pub trace_id: String,
    pub segment_id: u64,
    pub t_start: f64,
    pub t_end: f64,
    pub frontend_version: String,
    pub tensor: Tensor3<f32>,
    pub dynamics: Option<DynamicsSeries>,
}

fn bad(msg: impl Into<String>) -> GatewayError {
    GatewayError::BadEnvelope(msg.into())
}

impl SegmentEnvelope {
    pub fn body(&self) -> Vec<u8> {
        let t = &self.tensor;
        let mut out = encode_tensor(&[t.c, t.h, t.w], &t.data);
        if let Some(d) = &self.dynamics {
            let flat: Vec<f32> = d.streams.iter().flatten().map(|&v| v as f32).collect();
            out.extend(encode_tensor(&[d.channels(), d.len()], &flat));
        }
        out
    }

    pub fn headers(&self) -> Vec<(&'static str, String)> {
        let mut h = vec![
            (H_TRACE, self.trace_id.clone()),
            (H_SEGMENT, self.segment_id.to_string()),
            (H_T_START, self.t_start.to_string()),
            (H_T_END, self.t_end.to_string()),
            (H_FRONTEND, self.frontend_version.clone()),
        ];
        if let Some(d) = &self.dynamics {
            h.push((H_FS, d.fs.to_string()));
            h.push((H_DYN_T0, d.t0.to_string()));
        }
        h
    }

    /// Parses headers (looked up by lower-case name) and body.
    pub fn from_parts<'a>(header: impl Fn(&str) -> Option<&'a str>, body: &[u8]) -> Result<Self, GatewayError> {
        let req = |name: &str| header(name).ok_or_else(|| bad(format!("missing header {name}")));
        let num = |name: &str| -> Result<f64, GatewayError> {
            let v: f64 = req(name)?.trim().parse().map_err(|_| bad(format!("{name} is not a number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad(format!("{name} is not finite")))
            }
        };
        let trace_id = req(H_TRACE)?.to_string();
        let segment_id = req(H_SEGMENT)?
            .trim()
            .parse()
            .map_err(|_| bad(format!("{H_SEGMENT} is not an unsigned integer")))?;
        let (t_start, t_end) = (num(H_T_START)?, num(H_T_END)?);
        if t_end < t_start {
            return Err(bad("t_end precedes t_start"));
        }
        let frontend_version = req(H_FRONTEND)?.to_string();

        let (raw, rest) = split_tensor(body).map_err(|e| bad(format!("segment tensor: {e}")))?;
        let [c, f, t] = raw.dims[..] else {
            return Err(bad(format!("segment tensor must be rank 3, got dims {:?}", raw.dims)));
        };
        if t > MAX_FRAMES {
            return Err(bad(format!("{t} frames exceed the limit of {MAX_FRAMES}")));
        }
        let tensor = Tensor3::from_vec(c, f, t, raw.data);
        if !tensor.is_finite() {
            return Err(bad("segment tensor holds non-finite values"));
        }

        let dynamics = if rest.is_empty() {
            None
        } else {
            let (raw, tail) = split_tensor(rest).map_err(|e| bad(format!("dynamics tensor: {e}")))?;
            if !tail.is_empty() {
                return Err(bad("trailing bytes after the dynamics tensor"));
            }
            let [dc, n] = raw.dims[..] else {
                return Err(bad(format!("dynamics tensor must be rank 2, got dims {:?}", raw.dims)));
            };
            if dc != c {
                return Err(bad(format!("dynamics has {dc} streams, segment has {c}")));
            }
            let fs = num(H_FS)?;
            if fs <= 0.0 {
                return Err(bad("sample rate must be positive"));
            }
            let streams: Vec<Vec<f64>> = raw.data.chunks(n).map(|s| s.iter().map(|&v| v as f64).collect()).collect();
            if streams.iter().flatten().any(|v| !v.is_finite()) {
                return Err(bad("dynamics hold non-finite values"));
            }
            let mut d = DynamicsSeries::new(streams, fs);
            d.t0 = header(H_DYN_T0).map(|_| num(H_DYN_T0)).transpose()?.unwrap_or(t_start);
            Some(d)
        };
        Ok(Self {
            trace_id,
            segment_id,
            t_start,
            t_end,
            frontend_version,
            tensor,
            dynamics,
        })
    }

    /// Checks the tensor against the model's `(C, F)`.
    pub fn check_shape(&self, channels: usize, freq_bins: usize) -> Result<(), GatewayError> {
        let (c, f, _) = self.tensor.dims();
        if (c, f) != (channels, freq_bins) {
            return Err(GatewayError::Shape(format!(
                "segment is {c}×{f}, the model expects {channels}×{freq_bins}"
            )));
        }
        Ok(())
    }

    pub fn to_sample(&self) -> Sample {
        Sample {
            id: self.segment_id,
            trace_id: self.trace_id.clone(),
            t_start: self.t_start,
            t_end: self.t_end,
            tensor: self.tensor.clone(),
            dynamics: self.dynamics.clone(),
        }
    }

    /// Builds the envelope for a front-end segment; the dynamics are rounded
    /// to `f32` exactly as the wire format carries them.
    pub fn from_emitted(id: u64, em: &sifall_core::Emitted) -> Self {
        let env = Self {
            trace_id: em.segment.source_trace.clone(),
            segment_id: id,
            t_start: em.segment.t_start,
            t_end: em.segment.t_end,
            frontend_version: FRONTEND_VERSION.to_string(),
            tensor: Tensor3::from_segment(&em.segment).cast(),
            dynamics: Some(em.dynamics.clone()),
        };
        let body = env.body();
        let headers = env.headers();
        Self::from_parts(|k| headers.iter().find(|(n, _)| *n == k).map(|(_, v)| v.as_str()), &body)
            .expect("encoded envelope decodes")
    }
}
