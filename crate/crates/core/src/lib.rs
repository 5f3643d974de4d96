//! Sparse-prior information bottleneck rationale extraction.

pub mod cli;
pub mod data;
pub mod distributions;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
