//! Cumulative link models for crop progress monitoring.
//!
//! The crate covers the whole modelling path: thermal-time and greenup
//! feature construction, fixed-effects cumulative link models under the
//! backward cumulative multinomial (BCM) and multivariate binomial (MB)
//! likelihoods, mixed-effects fits through a Laplace approximation,
//! Monte-Carlo cross-validated prediction error, and stage-requirement
//! arithmetic on fitted thresholds. A simulator generates synthetic panels
//! from the latent development model so every estimator can be checked
//! against a known truth.

pub mod agronomy;
pub mod dataset;
pub mod error;
pub mod estimation;
pub mod evaluation;
pub mod features;
pub mod likelihood;
pub mod link;
pub mod mixed;
pub mod simulator;

pub use error::{Error, Result};
