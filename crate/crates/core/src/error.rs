//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, filtering, and experiments.
#[derive(Debug, Error)]
pub enum Error {
    /// Input matrix violates a structural requirement (symmetry, positivity, shape).
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    /// Dimensions of supplied operands do not match.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The state covariance is singular where a full-rank covariance is required.
    #[error("singular state covariance: {0}")]
    SingularStateNoise(String),

    /// The state covariance is full rank, so there is no unforced subspace.
    #[error("state covariance has full rank; no unforced subspace")]
    NoUnforcedSubspace,

    /// A linear solve or factorization failed.
    #[error("linear algebra failure: {0}")]
    LinAlg(String),

    /// A state or intermediate quantity became non-finite.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// Every particle in the ensemble failed during an assimilation step.
    #[error("filter divergence: {0}")]
    FilterDivergence(String),

    /// Weights handed to an operation that requires normalized weights.
    #[error("weights are not normalized: sum = {0}")]
    UnnormalizedWeights(f64),

    /// Configuration file or option error.
    #[error("config error: {0}")]
    Config(String),

    /// Filesystem or serialization error from the experiment harness.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
