//! Context-enhanced encode–process–decode models for step-wise graph
//! reasoning, with the algorithmic tasks, training loop and experiment
//! runner around them.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod diff;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod model;
pub mod scalar;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tape32 = diff::Tape<f32>;
pub type Tape64 = diff::Tape<f64>;
pub type ParamStore32 = diff::ParamStore<f32>;
pub type ParamStore64 = diff::ParamStore<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Batch32 = model::Batch<f32>;
pub type Batch64 = model::Batch<f64>;
