//! Coarse-to-fine concept bottleneck models over precomputed embeddings.

pub mod cli;
pub mod discovery;
pub mod error;
pub mod evaluator;
pub mod hierarchy;
pub mod model;
pub mod noise;
pub mod numerics;
pub mod store;
pub mod synthetic;
pub mod trainer;

pub use error::{CfcbmError, Result};
