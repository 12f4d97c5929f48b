use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Crate-wide error. Each variant corresponds to the module that raised it so
/// the CLI can print a stable `ERROR <module>: <message>` line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Tensor(String),
    #[error("{0}")]
    Tokenize(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Teacher(String),
    #[error("{0}")]
    Student(String),
    #[error("{0}")]
    Distill(String),
    #[error("{0}")]
    Eval(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short module tag used in CLI error lines.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Tokenize(_) => "tokenize",
            Error::Data(_) => "data",
            Error::Teacher(_) => "teacher",
            Error::Student(_) => "student",
            Error::Distill(_) => "distill",
            Error::Eval(_) => "eval",
            Error::Checkpoint(_) | Error::File { .. } => "io",
            Error::Config(_) => "cli",
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(format!($($arg)*)))
    };
}
pub(crate) use bail;
