//! Sparse autoencoders over fixed-width activation vectors, with naive
//! bagging and boosting ensembles, intrinsic metrics and downstream probes.

pub mod cli;
pub mod data;
pub mod downstream;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod sae;

pub use error::{Error, Result};

/// Crate version recorded in checkpoints and result files.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
