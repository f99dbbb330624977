//! FallNet variational autoencoder with hand-written forward and backward passes.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod net;
pub mod optim;
pub mod tensor;
pub mod train;

pub use checkpoint::{
    decode_checkpoint, decode_tensor, encode_checkpoint, encode_tensor, load_checkpoint,
    save_checkpoint, split_tensor, RawTensor,
};
pub use layers::{conv2d_same, instance_norm, leaky_relu, max_pool_2x2, up_pool_2x2};
pub use net::{
    kl_divergence, loss, reparameterize, Decoded, Encoded, FallNet, FallNetConfig, LatentStats,
    LossReport, ParamEntry,
};
pub use optim::Adam;
pub use tensor::{Real, Tensor3};
pub use train::{fit, retrain, EpochReport, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum FallNetError {
    #[error("expected {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("max-pool needs even dims, got {h}×{w}")]
    OddPoolDims { h: usize, w: usize },
    #[error("pool indices do not match: expected {expected}, got {got}")]
    IndexMismatch { expected: usize, got: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("non-finite input")]
    NonFinite,
    #[error("non-finite gradient, step aborted")]
    NonFiniteGradient,
    #[error("empty training batch")]
    EmptyBatch,
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
