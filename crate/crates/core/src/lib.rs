//! Device-free fall detection from WiFi channel state information.
//!
//! The pipeline: [`sim`] renders synthetic CSI, [`dsp`] turns it into
//! channel dynamics and fall-like STFT segments, [`fallnet`] scores segments
//! by variational-autoencoder reconstruction error, and [`online`] runs the
//! self-updating detection loop, and [`eval`] scores decisions against ground truth.

pub mod augment;
pub mod corpus;
pub mod dsp;
pub mod eval;
pub mod fallnet;
pub mod online;
pub mod pretrain;
pub mod sim;

pub use augment::{AugmentPlan, AUGMENT_FACTOR};
pub use dsp::{DynamicsSeries, Emitted, FrontendConfig, FrontendEvent, SegmentBounds, SpectroSegment};
pub use eval::{Detection, EvalReport, TruthEvent};
pub use fallnet::{FallNet, FallNetConfig, FallNetError, Tensor3, TrainConfig};
pub use online::{
    AlarmRecord, AlarmStatus, Decision, Detector, DetectorState, LogRecord, OnlineConfig, OnlineError, Retrainer,
    Sample, Verdict,
};
pub use sim::{ChannelScenario, GroundTruthEvent, MotionKind};
