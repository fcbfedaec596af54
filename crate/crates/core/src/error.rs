use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error("state error: {0}")]
    State(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("runtime error: {0}")]
    Runtime(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the `pf` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Registry(_) => 2,
            Error::Data(_) | Error::Length(_) => 3,
            _ => 4,
        }
    }
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn data_err(msg: impl Into<String>) -> Error {
    Error::Data(msg.into())
}
