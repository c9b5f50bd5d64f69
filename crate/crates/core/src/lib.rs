//! Efficient-influence-function estimators for the mean untreated outcome
//! `psi = E[E(Y|W,A=0)]` and the mean untreated outcome among the treated
//! `theta = E[E(Y|W,A=0) | A=1]`.
//!
//! The crate has three layers:
//!
//! * [`distribution`] computes estimands, nuisance functions and EIFs
//!   exactly on finite-support laws, and checks EIFs against pathwise
//!   derivatives along mixture submodels.
//! * [`learners`] and [`estimators`] fit nuisance functions and build plug-in,
//!   IPW and one-step estimators with optional cross-fitting.
//! * [`vonmises`] and [`montecarlo`] take the estimators apart: exact error
//!   decompositions and remainder identities on known truths, and
//!   replication studies of coverage, rates and double robustness.

pub mod cli;
pub mod data;
pub mod distribution;
pub mod error;
pub mod estimators;
pub mod learners;
pub mod montecarlo;
pub mod quadrature;
pub mod vonmises;

pub use data::{Dataset, Observation};
pub use distribution::{Estimand, FiniteDistribution};
pub use error::{Error, Result};
