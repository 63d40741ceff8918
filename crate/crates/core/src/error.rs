use thiserror::Error;

/// Errors shared by every estimation module.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Cholesky factorization failed even after escalating diagonal jitter.
    #[error("SPD repair failed for {dim}x{dim} matrix (final jitter epsilon {final_epsilon:e})")]
    SpdRepair { final_epsilon: f64, dim: usize },

    /// Measurement covariance could not be inverted during a conditional update.
    #[error("conditioning failed: measurement covariance singular after jitter")]
    Conditioning,

    /// A model map returned a non-finite value.
    #[error("non-finite map output at component {component}")]
    Evaluation { component: usize },

    /// A particle produced a non-finite log-weight.
    #[error("non-finite log-weight")]
    DegenerateWeight,

    /// Every particle weight vanished; the caller must resample or abort.
    #[error("all particle weights vanished")]
    TotalDegeneracy,

    /// The radial random-map equation could not be bracketed.
    #[error("random-map solve failed: no sign change on bracket")]
    MapSolve,

    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
