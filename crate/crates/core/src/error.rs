//! Error types shared across the toolkit.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input violated a precondition (bad dimension, label out of range,
    /// empty class, epsilon outside (0,1), ...).
    #[error("rejected input: {0}")]
    RejectedInput(String),

    /// A caller broke an API contract (missing upstream gradient for a tapped
    /// layer, empty reference list, empty tuning grid, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An attack produced a non-finite gradient and was aborted.
    #[error("attack aborted: {0}")]
    NonFiniteGradient(String),

    /// Training produced a non-finite loss term.
    #[error("training diverged at epoch {epoch} batch {batch}: {term} loss is not finite")]
    Diverged {
        epoch: usize,
        batch: usize,
        term: &'static str,
    },

    /// A binary container failed to parse. `offset` is the byte position of
    /// the first inconsistency.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn rejected(msg: impl Into<String>) -> Self {
        Error::RejectedInput(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn parse(offset: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            msg: msg.into(),
        }
    }
}
