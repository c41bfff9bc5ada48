use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Bad magic, version, header or missing column.
    #[error("format error: {0}")]
    Format(String),

    /// File content disagrees with its own header.
    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("taxonomy error: {0}")]
    Taxonomy(String),

    #[error("validation error: {0}")]
    Validation(String),

    /// A problem that cannot be trained as stated, e.g. a single class.
    #[error("degenerate problem: {0}")]
    Degenerate(String),

    #[error("class already seen: species {0}")]
    DuplicateClass(u16),

    #[error("model is untrained: {0}")]
    Untrained(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("task {index}: {source}")]
    Task {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code, used by the CLI error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::Format(_) => "E_FORMAT",
            Error::Corruption(_) => "E_CORRUPT",
            Error::Parse { .. } => "E_PARSE",
            Error::Taxonomy(_) => "E_TAXONOMY",
            Error::Validation(_) => "E_VALIDATION",
            Error::Degenerate(_) => "E_DEGENERATE",
            Error::DuplicateClass(_) => "E_DUPLICATE_CLASS",
            Error::Untrained(_) => "E_UNTRAINED",
            Error::Generation(_) => "E_GENERATION",
            Error::Config(_) => "E_CONFIG",
            Error::Task { source, .. } => source.code(),
            Error::Serde(_) => "E_SERDE",
        }
    }
}
