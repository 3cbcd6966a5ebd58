//! Conditional denoising diffusion for day-ahead renewable power scenarios.
//!
//! A gated dilated-convolution network learns to predict the Gaussian noise
//! mixed into normalized daily power profiles, conditioned on the day-ahead
//! forecast. Ancestral sampling from pure noise then yields scenario sets
//! that are scored with coverage, interval width, Euclidean distance and
//! autocorrelation metrics.
//!
//! Module map:
//! - [`diffgraph`]: tensors, reverse-mode tape, gradient checking
//! - [`schedule`]: linear and cosine noise schedules
//! - [`denoiser`]: the noise-prediction network
//! - [`diffusion`]: forward corruption, training loss, reverse sampling
//! - [`trainer`]: Adam, training loop, checkpoints
//! - [`dataset`]: CSV ingestion, normalization, day segmentation
//! - [`metrics`]: scenario-set evaluation

pub mod dataset;
pub mod denoiser;
pub mod diffgraph;
pub mod diffusion;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;

/// Hours per day sample.
pub const SEQ_LEN: usize = 24;
