//! Shared fixtures for the benchmarks.

use sifall_core::corpus::simulate_and_segment;
use sifall_core::corpus::sequence_scenario;
use sifall_core::sim::generate_trace;
use sifall_core::{DynamicsSeries, Emitted, MotionKind, Tensor3};

/// Dynamics of a short trace holding one sit and one fall.
pub fn dynamics() -> DynamicsSeries {
    let (trace, _) = generate_trace(&sequence_scenario(&[MotionKind::Sit, MotionKind::WalkFall], 3)).expect("simulate");
    DynamicsSeries::from_trace(&trace).expect("dynamics")
}

/// One emitted segment from the same kind of trace.
pub fn emitted() -> Emitted {
    simulate_and_segment(&sequence_scenario(&[MotionKind::Squat], 4), "bench")
        .expect("simulate")
        .segments
        .into_iter()
        .next()
        .expect("one segment")
}

pub fn tensor(em: &Emitted) -> Tensor3<f32> {
    Tensor3::from_segment(&em.segment).cast()
}
