use thiserror::Error;

/// Errors raised while parsing a binary weight file.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WeightFormatError {
    #[error("bad magic: expected \"GDW1\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("truncated file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("unknown dtype tag {tag} for tensor {name:?}")]
    UnknownDtype { name: String, tag: u8 },
    #[error("tensor {name:?} has rank {rank}; at most 4 is supported")]
    UnsupportedRank { name: String, rank: u8 },
    #[error("tensor {name:?} has a zero-sized dimension")]
    ZeroDim { name: String },
    #[error("tensor name is not valid UTF-8 at offset {offset}")]
    InvalidName { offset: usize },
    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),
}

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, channel counts or structural settings do not fit together.
    #[error("configuration error: {0}")]
    Config(String),
    /// A non-finite value showed up where a finite one is required.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// An operation was requested in a state that does not support it.
    #[error("state error: {0}")]
    State(String),
    #[error("weight file: {0}")]
    Weights(#[from] WeightFormatError),
    #[error("config document: {0}")]
    Document(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
