use std::path::PathBuf;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("batch-size error: {0}")]
    BatchSize(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("empty sequence")]
    EmptySequence,

    #[error("empty evaluation: no queries")]
    EmptyEvaluation,

    #[error("ground-truth error: {0}")]
    GroundTruth(String),

    #[error("format error at byte {offset}: {field}: {message}")]
    Format {
        field: String,
        offset: u64,
        message: String,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
