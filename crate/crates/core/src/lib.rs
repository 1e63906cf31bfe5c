//! Spatiotemporal Gaussian process models for station data, with a
//! nearest-neighbor sparse approximation of the spatial covariance.

pub mod baselines;
pub mod cli;
pub mod covariance;
pub mod error;
pub mod inference;
pub mod law;
pub mod linalg;
pub mod metrics;
pub mod nngp;
pub mod pipeline;
pub mod predict;
pub mod spatial;
pub mod stmodel;
pub mod synth;

pub use error::{Error, Result};
