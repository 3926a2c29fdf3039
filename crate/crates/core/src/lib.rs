//! Online Bayesian learning for exponential-family factorization models.
//!
//! The core object is a Gaussian posterior over per-entity parameter vectors
//! (regression weights, matrix/tensor factors, factorization-machine factors)
//! maintained by a decoupled extended Kalman filter: the covariance is stored
//! block-diagonally per entity, each observation touches only the entities it
//! involves, and mean-reverting parameter drift is applied lazily with
//! closed-form multi-step predicts. An iterated (MAP) update variant, Thompson
//! sampling / greedy recommendation policies, and a simulation harness with an
//! AdaGrad baseline sit on top.

pub mod bandit;
pub mod config;
pub mod error;
pub mod expfam;
pub mod filter;
pub mod numerics;
pub mod signal;
pub mod sim;
pub mod snapshot;

pub use error::{DekfError, Result};
