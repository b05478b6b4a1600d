use thiserror::Error;

/// Errors raised across the library. The three classes map onto CLI exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied arguments that violate a precondition.
    #[error("usage error: {0}")]
    Usage(String),
    /// Input data could not be read or is malformed.
    #[error("data error: {0}")]
    Data(String),
    /// A computation produced a non-finite value.
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit status: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Data(_) | Error::Io { .. } => 2,
            Error::Numerical(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
