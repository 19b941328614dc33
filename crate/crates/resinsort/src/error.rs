use thiserror::Error;

/// Crate-wide error type. The CLI maps variants onto exit codes so that
/// scripts can branch on the failure class.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/layer dimension disagreement.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Bad dataset, file format, or configuration contents.
    #[error("data error: {0}")]
    Data(String),
    /// Non-finite values or a failed numeric routine.
    #[error("numeric failure: {0}")]
    Numeric(String),
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
