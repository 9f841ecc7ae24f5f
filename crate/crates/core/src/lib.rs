//! Simulation-based calibration for Gaussian process models.

pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod marg;
pub mod model;
pub mod output;
pub mod rng;
pub mod sbc;
pub mod special;

pub use error::{Error, Result};
