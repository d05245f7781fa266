//! Hyper-scalable load balancing: stale-estimate JSQ dispatching, its fluid
//! limits, the asynchronous fixed point, a discrete-event simulator and an
//! exact small-system Markov-chain oracle.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ctmc;
pub mod des;
pub mod error;
pub mod experiments;
pub mod fixed_point;
pub mod fluid_async;
pub mod fluid_sync;
pub mod model;
mod ode;
pub mod policy;
pub mod rng;
pub mod trajectory;
pub mod validate;

pub use error::{Error, Result};
pub use fixed_point::FixedPoint;
pub use model::{CountMatrix, DerivedFunctionals, FluidState, ModelParams};
pub use policy::PolicySpec;
pub use trajectory::Trajectory;
