//! Buffered asynchronous SGD (BASGD) with Byzantine-robust aggregation.
//!
//! A parameter server keeps `B` buffers; worker `s` feeds buffer `s mod B`.
//! When every buffer holds at least one gradient the server aggregates the
//! buffer means with a robust rule (coordinate-wise median or trimmed mean),
//! takes one SGD step and clears the buffers. With `B = 1` this is ordinary
//! asynchronous SGD.
//!
//! The numeric modules are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar for the common cases. The experiment harness
//! works in `f64`.

pub mod aggregation;
pub mod buffer;
pub mod error;
pub mod harness;
pub mod rng;
pub mod scalar;
pub mod server;
pub mod sim;
pub mod tasks;
pub mod worker;

pub use aggregation::{AggregationRule, BoundInputs, CandidateSet, RobustnessParams};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use server::LearningRate;
pub use sim::{DelayDist, DelayModel, SimConfig, StopCriterion};
pub use worker::{AttackKind, NoiseNorm, Schedule, WorkerBehavior};

/// Model parameters `w`.
pub type ParameterVector = Vec<f64>;

pub type Server = server::Server<f64>;
pub type Server32 = server::Server<f32>;
pub type BufferBank = buffer::BufferBank<f64>;
pub type BufferBank32 = buffer::BufferBank<f32>;
pub type Objective = tasks::Objective<f64>;
pub type Objective32 = tasks::Objective<f32>;
pub type GradientMessage = worker::GradientMessage<f64>;
pub type GradientMessage32 = worker::GradientMessage<f32>;
pub type SimOutput = sim::SimOutput<f64>;
pub type SimOutput32 = sim::SimOutput<f32>;
