//! Sequential data assimilation with implicit particle filters.
//!
//! The crate implements the implicit particle filter with random maps and
//! gradient-descent minimization, its simplified variant, filters for
//! models whose state covariance is singular (partial noise), SIR and EnKF
//! baselines, a one-dimensional magnetohydrodynamic test problem
//! discretized with Legendre spectral elements, and a twin-experiment
//! harness with a CLI.
//!
//! Layout:
//! - [`model`]: state-space and partial-noise abstractions, covariance
//!   diagonalization, built-in linear-Gaussian and semi-linear heat models.
//! - [`ensemble`]: weighted particles, effective sample size, systematic
//!   resampling.
//! - [`filter`]: the implicit filters, the random-map solve, the
//!   gradient-descent minimizer, and the SIR/EnKF baselines.
//! - [`geo`]: the spectral-element test problem and its partial-noise form.
//! - [`experiments`]: twin experiments, batches, convergence studies,
//!   and the CSV/JSON result writers behind the CLI.

pub mod ensemble;
pub mod error;
pub mod filter;
pub mod linalg;
pub mod geo;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
