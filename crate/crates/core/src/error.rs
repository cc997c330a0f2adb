use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AdkError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AdkError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("missing class: {0}")]
    MissingClass(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl AdkError {
    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        AdkError::Format {
            offset: offset as u64,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AdkError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            AdkError::Dimension { .. } => "DimensionError",
            AdkError::DegenerateVector(_) => "DegenerateVectorError",
            AdkError::EmptyInput(_) => "EmptyInputError",
            AdkError::Index { .. } => "IndexError",
            AdkError::Schema(_) => "SchemaError",
            AdkError::Domain(_) => "DomainError",
            AdkError::MissingClass(_) => "MissingClassError",
            AdkError::Format { .. } => "FormatError",
            AdkError::Data(_) => "DataError",
            AdkError::Io { .. } => "IoError",
            AdkError::Invariant(_) => "InvariantError",
        }
    }
}
