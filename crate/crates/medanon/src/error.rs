//! Error taxonomy shared across the crate.

use thiserror::Error;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates a documented bound.
    #[error("configuration error: {0}")]
    Config(String),

    /// A dataset could not be ingested from disk.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// No sample satisfying the triplet constraints exists.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// An argument violates an operation's contract (shape, range, dimension).
    #[error("contract error: {0}")]
    Contract(String),

    /// Training diverged or produced a non-finite loss.
    #[error("training error: {0}")]
    Training(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn ingestion(msg: impl Into<String>) -> Self {
        Error::Ingestion(msg.into())
    }
    pub fn sampling(msg: impl Into<String>) -> Self {
        Error::Sampling(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn training(msg: impl Into<String>) -> Self {
        Error::Training(msg.into())
    }

    /// Machine-parsable category used by the CLI for its one-line error output
    /// and exit-code mapping.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Ingestion(_) => "ingestion",
            Error::Sampling(_) => "sampling",
            Error::Contract(_) => "contract",
            Error::Training(_) => "training",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
