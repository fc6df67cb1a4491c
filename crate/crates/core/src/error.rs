//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Tensor or layer shape mismatch; the message names the offending dimension.
    Shape(String),
    /// DSL syntax or structural error with source position.
    Parse { line: usize, msg: String },
    /// Graph-level problem (unknown node, cycle, inconsistent edge).
    Graph(String),
    /// Weights file or dataset file is malformed; names the file/tensor.
    Format(String),
    Io(std::io::Error),
    /// Numeric failure (NaN gradient, divergent loss).
    Numeric(String),
    /// Invalid configuration value.
    Config(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Parse { line, msg } => write!(f, "parse error at line {line}: {msg}"),
            Error::Graph(msg) => write!(f, "graph error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
