//! Error taxonomy shared across the crate.
//!
//! The variants map onto how a batch front-end should react: configuration
//! and usage errors are caller mistakes, numeric and run errors abort a
//! computation, and analysis errors are verdicts about data (a trace with no
//! dominant peak is a result, not a crash).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// Precondition violated by the caller (e.g. grid mismatch).
    #[error("usage error: {0}")]
    Usage(String),

    /// Numerical failure during a computation (NaN amplitudes,
    /// non-convergent diagonalization).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A data-analysis step could not produce a result.
    #[error("analysis error: {0}")]
    Analysis(String),

    /// An ensemble run failed as a whole (too many bad trajectories).
    #[error("run error: {0}")]
    Run(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn analysis(msg: impl Into<String>) -> Self {
        Error::Analysis(msg.into())
    }

    pub fn run(msg: impl Into<String>) -> Self {
        Error::Run(msg.into())
    }
}
