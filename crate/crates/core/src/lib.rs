//! Post-hoc distribution calibration for probabilistic regression.
//!
//! A base regressor emits Gaussian predictive distributions; [`svgp`] learns
//! input-dependent Beta calibration maps over them with a sparse variational
//! multi-output GP, [`isotonic`] provides the quantile-recalibration baseline
//! and [`metrics`] scores the resulting grid densities.

pub mod base;
pub mod beta_link;
pub mod data;
pub mod dist;
pub mod error;
pub mod experiment;
pub mod isotonic;
pub mod kernel;
pub mod metrics;
pub mod optim;
pub mod svgp;

pub use dist::{GaussianPrediction, GridDistribution, RngStream};
pub use error::{CalibError, Result};
