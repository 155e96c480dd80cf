//! Structured state-space sequence models with locality-sensitive-hashing
//! bucketing for long point-cloud sequences.
//!
//! The math is generic over [`numeric::Scalar`] (`f32` or `f64`); the aliases
//! below pin the two precisions used in practice: `f64` for verification and
//! training, `f32` for throughput benchmarks.

pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod numeric;
pub mod loss;
pub mod lsh;
pub mod metrics;
pub mod model;
pub mod ssm;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

pub type Tensor64 = numeric::Tensor<f64>;
pub type Tensor32 = numeric::Tensor<f32>;
pub type Tape64 = numeric::Tape<f64>;
pub type Tape32 = numeric::Tape<f32>;
