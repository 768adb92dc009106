use std::path::PathBuf;

/// Error type shared by all modules of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad file format at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable machine-parsable code, used by the CLI error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "E_SHAPE",
            Error::Config(_) => "E_CONFIG",
            Error::Format { .. } => "E_FORMAT",
            Error::Io { .. } => "E_IO",
            Error::NonFinite { .. } => "E_NONFINITE",
            Error::Invalid(_) => "E_INVALID",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
