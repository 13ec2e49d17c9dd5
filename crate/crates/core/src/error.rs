use thiserror::Error;

#[derive(Debug, Error)]
pub enum SeplError {
    /// Input violated a documented invariant or precondition.
    #[error("validation error: {0}")]
    Validation(String),
    /// A container file could not be decoded.
    #[error("format error: {0}")]
    Format(String),
    /// NaN/Inf produced during training or inference.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SeplError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            SeplError::Validation(_) | SeplError::Format(_) | SeplError::Json(_) => 2,
            SeplError::Numerical(_) => 3,
            SeplError::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, SeplError>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::SeplError::Validation(format!($($arg)*))
    };
}
pub(crate) use invalid;
