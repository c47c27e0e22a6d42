use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("input too short: need at least {needed}, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("unknown token {0}")]
    Vocabulary(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("degenerate normalization statistics: {0}")]
    DegenerateStats(String),
    #[error("index {index} out of range for {len}")]
    Index { index: usize, len: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Unsupported(_) | Error::Checkpoint(_) => 2,
            Error::NonFinite(_) | Error::Singular(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
