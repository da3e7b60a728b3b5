//! Error type shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by estimators, generators, and validators.
///
/// The variants distinguish *caller* mistakes (bad arguments, malformed
/// inputs) from *data* problems discovered while fitting, so that a harness
/// can decide whether a failure is retryable.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument was outside its documented domain (e.g. a probability
    /// outside `[0, 1]`, an unknown setting identifier, a zero fold count).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input data failed validation; the message names the offending row or
    /// column so the problem can be located in the source file.
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// A model could not be fit on the data it was given (e.g. a treatment
    /// arm is empty in a training split). The message suggests a remedy when
    /// one exists, typically a larger sample.
    #[error("fit failed: {0}")]
    FitFailed(String),

    /// A design matrix is rank deficient; the message names the collinear
    /// columns that must be dropped.
    #[error("rank-deficient design: {0}")]
    RankDeficient(String),
}

impl Error {
    /// Shorthand for an [`Error::InvalidArgument`].
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Shorthand for an [`Error::InvalidData`].
    pub fn invalid_data(msg: impl Into<String>) -> Self {
        Error::InvalidData(msg.into())
    }

    /// Shorthand for an [`Error::FitFailed`].
    pub fn fit_failed(msg: impl Into<String>) -> Self {
        Error::FitFailed(msg.into())
    }
}
