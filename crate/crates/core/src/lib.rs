//! Uncertainty-aware flow matching on low-dimensional synthetic data.
//!
//! A velocity network predicts a Gaussian over the marginal velocity (mean
//! and per-dimension variance). The crate trains it, propagates the
//! predicted variance along sampling trajectories, uses it to guide and
//! filter samples, and evaluates the result.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod model;
pub mod par;
pub mod paths;
pub mod sample;
pub mod stats;
pub mod svg;
pub mod train;
pub mod uq;

pub use error::{Error, Result};
pub use model::{Cond, ModelSpec, VelocityField, VelocityModel};
pub use paths::AffinePath;
pub use sample::{SamplerConfig, VelocityProvider};
