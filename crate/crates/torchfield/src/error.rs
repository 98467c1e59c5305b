use thiserror::Error;

/// Errors surfaced by the library. Variant names follow the failure class,
/// not the module that raised it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("broadcast mismatch: {0}")]
    Broadcast(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("tape error: {0}")]
    Tape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid value: {0}")]
    Value(String),
    #[error("out of bounds: {0}")]
    Bounds(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
