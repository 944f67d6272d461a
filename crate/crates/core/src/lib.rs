//! Surrogate-assisted targeted estimation of a nested causal functional when
//! the outcome is administratively censored and treatment is confounded.
//!
//! The estimation procedure runs in three phases:
//!
//! 1. cluster-level cross-fitting of the treatment propensity, the censoring
//!    propensity and the outcome regression ([`nuisance`]);
//! 2. a two-stage logistic-link fluctuation that first targets the outcome
//!    regression and then the intermediate regression of the targeted outcome
//!    on treatment and covariates ([`targeting`]);
//! 3. point estimation with cluster-level influence curves ([`estimators`]) and
//!    sandwich / leave-one-cluster-out jackknife inference ([`variance`]).
//!
//! [`pipeline`] wires the phases together for a single dataset, [`dgp`] holds
//! the clustered simulation design and [`harness`] drives the Monte Carlo
//! study and writes reports.

pub mod dgp;
pub mod error;
pub mod estimators;
pub mod glm;
pub mod harness;
pub mod nuisance;
pub mod pipeline;
pub mod rng;
pub mod targeting;
pub mod variance;

pub use error::{Error, Result};
