//! Semi-mechanistic Bayesian renewal model for death-driven epidemic
//! inference.
//!
//! Latent daily infections follow a renewal recursion damped by susceptible
//! depletion, with a time-varying reproduction number linked to mobility
//! covariates. Infections map to expected deaths through an infection
//! fatality ratio and the infection-to-death delay, then through
//! under-reporting and reporting-delay factors into a negative-binomial
//! likelihood for the observed death counts.

pub mod delaydist;
pub mod error;
pub mod fit;
pub mod hierarchy;
pub mod ingest;
pub mod model;
pub mod nowcast;
pub mod observation;
pub mod renewal;
pub mod report;
pub mod sampler;
pub mod simulate;

pub use error::{Error, Result};
