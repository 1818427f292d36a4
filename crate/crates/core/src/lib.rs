//! Propensity-score lab: L1-penalized logistic propensity models fit along a
//! regularization path, balance-based selection of the penalty, weighted
//! effect estimation, and bias detection with synthetic negative-control
//! exposure cohorts.

pub mod analysis;
pub mod balance;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod hal_basis;
pub mod lasso;
pub mod rng;
pub mod simulation;
pub mod synthetic_nc;
pub mod weighting;

pub use error::{Error, Result};
