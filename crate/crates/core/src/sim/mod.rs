//! Deterministic discrete-event simulation of the asynchronous
//! parameter-server system.
//!
//! Events are ordered by `(time, seq)`, with `seq` assigned at scheduling, so
//! a run is a pure function of its configuration and seed. Server processing
//! is instantaneous; only compute times and latencies move the clock.

mod delay;
mod engine;
mod histogram;

pub use delay::{sample_worker_delay, DelayDist, DelayModel};
pub use engine::{
    run, SimConfig, SimOutput, StepObservation, StopCriterion, StopReason, TauStats,
};
pub use histogram::{tau_histogram, TauHistogram};
