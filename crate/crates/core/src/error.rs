//! Shared error type for the whole crate.

use crate::sampler::ChainRecord;

/// Errors produced by model evaluation, estimation, sampling and post-processing.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller passed an argument outside an operation's domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A configuration value violates its invariant.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A model produced a non-finite gradient; `term` names the offender
    /// ("prior" or a 0-based datum index).
    #[error("non-finite gradient from term {term}")]
    ModelEvaluation { term: String },

    /// A stateful operation was driven from an inconsistent state.
    #[error("inconsistent state: {0}")]
    State(String),

    /// The chain left the admissible region; the partly-built record is
    /// attached so callers can inspect the trajectory up to the failure.
    #[error("chain diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        partial: Box<ChainRecord>,
    },

    /// The covariance of the control variates is numerically singular.
    #[error(
        "degenerate control-variate covariance (condition number {condition:.3e}); \
         consider enabling the ridge option"
    )]
    DegenerateCovariance { condition: f64 },

    /// The model does not implement an optional capability (for example
    /// per-record log-likelihoods).
    #[error("model capability not available: {0}")]
    Capability(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
