use std::io;

use thiserror::Error;

pub type Result<T, E = SailError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SailError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("corrupt artifact: {0}")]
    Corrupt(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SailError {
    /// Process exit code for the CLI: 2 usage/config, 3 numeric failure, 4 corrupt artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            SailError::NonFinite(_) => 3,
            SailError::Corrupt(_) => 4,
            _ => 2,
        }
    }
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::SailError::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
