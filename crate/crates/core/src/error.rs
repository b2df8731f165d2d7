use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Malformed or out-of-range input data.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("partition error: {0}")]
    Partition(String),

    /// A registered strategy whose algorithm is not provided.
    #[error("{0}: not implemented — extension point")]
    NotImplemented(String),

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse error classes, shared by the CLI exit codes and the C ABI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn shape(message: impl Into<String>) -> Self {
        Error::Shape(message.into())
    }

    pub fn input(message: impl Into<String>) -> Self {
        Error::Input(message.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config { .. } | Error::NotImplemented(_) => ErrorKind::Config,
            Error::Input(_) | Error::Partition(_) => ErrorKind::Data,
            Error::Shape(_) | Error::Io { .. } => ErrorKind::Runtime,
            Error::Context { source, .. } => source.kind(),
        }
    }
}
