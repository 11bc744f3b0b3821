use thiserror::Error;

#[derive(Error, Debug)]
pub enum HvgraeError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("ingestion error in {file}:{line}: {msg}")]
    Ingest {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl HvgraeError {
    /// Process exit code for the CLI: 2 for input/contract problems, 3 for
    /// numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HvgraeError::Validation(_)
            | HvgraeError::Shape(_)
            | HvgraeError::Ingest { .. }
            | HvgraeError::Contract(_)
            | HvgraeError::Unsupported(_) => 2,
            HvgraeError::Numerical(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HvgraeError>;
