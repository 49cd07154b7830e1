//! Kernel ensemble analog forecasting for low-frequency patterns in gridded
//! time series.
//!
//! The pipeline runs lag embedding, an NLSA kernel, a diffusion-maps
//! Laplacian eigenbasis, out-of-sample extension by geometric harmonics or
//! Laplacian pyramids, and finally analog forecasts scored against
//! persistence and regime-switching autoregressive baselines.

pub mod baselines;
pub(crate) mod binio;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod forecast;
pub mod hash;
pub mod kernels;
pub mod laplacian;
pub mod metrics;
pub mod ose;
pub(crate) mod par;
pub mod rng;

pub use error::{Error, Result};
