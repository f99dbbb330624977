//! Channel-dynamics extraction and fall-like segmentation.

pub mod changepoint;
pub mod dynamics;
pub mod ridge;
pub mod segmenter;
pub mod stft;

pub use changepoint::changepoint_refine;
pub use dynamics::{
    conjugate_multiply, cosine_similarity_ref, detect_movement, AmplitudeVector, DynamicsSeries,
};
pub use ridge::{ridge_accel, ridge_path, AccelMode, AccelTrace, RidgeParams};
pub use segmenter::{segment_stream, Emitted, FrontendConfig, FrontendEvent, SegmentBounds, Segmenter};
pub use stft::{stft, SpectroSegment, Spectrogram, Stft, StftConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DspError {
    #[error("all-zero amplitude vector")]
    SignalDead,
    #[error("segment of {samples} samples is shorter than one {window}-sample STFT frame")]
    SegmentTooShort { samples: usize, window: usize },
}
