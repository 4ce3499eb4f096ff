use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("training diverged at {at}: non-finite loss")]
    Divergence { at: String },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("{clients} clients exceed the exact enumeration cap of {cap}; use Monte-Carlo valuation")]
    TooManyClients { clients: usize, cap: usize },

    #[error("malformed trace: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
