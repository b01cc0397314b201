use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("integer overflow computing {0}")]
    Overflow(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("job failed: {0}")]
    Job(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 validation, 2 job failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_)
            | Error::Invalid(_)
            | Error::Parse(_)
            | Error::Config(_)
            | Error::Overflow(_) => 1,
            Error::Io { .. } => 3,
            Error::Singular(_) | Error::NonFinite(_) | Error::Job(_) => 2,
        }
    }
}
