//! Nonlinear state estimation via implicit particle filtering realized as a
//! bank of nonlinear Kalman filters, together with an iterative reference
//! implementation and EKF/UKF-proposal baselines.
//!
//! Modules:
//! - [`models`]: the state-space abstraction and the Lorenz'96 benchmark
//!   system (RK4 discretization, partial nonlinear measurement, uniform
//!   noise, truth simulation).
//! - [`gaussian`]: SPD handling, conditional updates, log-densities.
//! - [`kf_bank`]: per-particle EKF/UKF prediction and update.
//! - [`implicit`]: reference sampling, the particle map and weights, and the
//!   optimization + random-map solver.
//! - [`filters`]: the assembled sequential filters, resampling, and point
//!   estimation.
//! - [`stream`]: deterministic RNG stream derivation.

pub mod error;
pub mod filters;
pub mod gaussian;
pub mod implicit;
pub mod kf_bank;
pub mod models;
pub mod stream;

pub use error::{Error, Result};
