use std::path::PathBuf;
use thiserror::Error;

/// Error type shared by the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest parse error at line {line}: {msg}")]
    ManifestParse { line: usize, msg: String },

    #[error("missing files referenced by manifest: {0:?}")]
    MissingFiles(Vec<PathBuf>),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("training failure: {0}")]
    Training(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 training.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::ManifestParse { .. }
            | Error::MissingFiles(_)
            | Error::Io { .. }
            | Error::Image { .. }
            | Error::Checkpoint(_) => 3,
            Error::Training(_) | Error::Precondition(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
