//! One error type for the whole crate, with a stable mapping to CLI exit codes.

use thiserror::Error;

/// Everything that can go wrong across the tensor engine, the model, the
/// retrieval stack, data generation, and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes or an operation applied to the wrong rank.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A parameter value outside its legal range (temperatures, rates, sizes).
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An index or id that does not exist in the addressed structure.
    #[error("index out of range: {0}")]
    Index(String),

    /// Non-finite values, undefined similarities, or a divergence that is not
    /// defined for the given inputs (e.g. KL with zero mass where the target
    /// has support).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Capacity overruns: context windows, iteration budgets, length caps.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Malformed or inconsistent data: duplicate ids, unpaired records,
    /// unknown tokens, empty inputs where content is required.
    #[error("data error: {0}")]
    Data(String),

    /// A file that does not match its declared on-disk format.
    #[error("format error: {0}")]
    Format(String),

    /// Bad command-line usage or an unusable run configuration.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit code for this error: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Data(_) | Error::Format(_) | Error::Io(_) => 2,
            Error::Shape(_)
            | Error::Parameter(_)
            | Error::Index(_)
            | Error::Numeric(_)
            | Error::Capacity(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
