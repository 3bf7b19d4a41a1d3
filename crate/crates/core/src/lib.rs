//! Selective knowledge distillation laboratory.
//!
//! Implements the full selection framework for distilling an autoregressive
//! teacher into a smaller student: position-importance metrics and selection
//! policies, class-axis sparsification by importance sampling, sample-axis
//! ranking, a bit-packed offline teacher-supervision cache, and a desk-scale
//! tabular-teacher / factorized-student pair with analytic gradients so every
//! objective and estimator can be executed and verified end to end.

pub mod cache;
pub mod class_sampling;
pub mod config;
pub mod error;
pub mod eval;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod runner;
pub mod selection;
pub mod train;

pub use error::{Error, Result};
