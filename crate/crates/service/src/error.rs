use thiserror::Error;

pub type Result<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Error)]
pub enum ServiceError {
    /// The caller's document or arguments are invalid.
    #[error("{0}")]
    Validation(String),
    /// A valid request failed while executing.
    #[error("{0}")]
    Runtime(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
}

impl ServiceError {
    pub fn validation(msg: impl Into<String>) -> Self {
        ServiceError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        ServiceError::Runtime(msg.into())
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            ServiceError::Validation(_) | ServiceError::NotFound(_) | ServiceError::Conflict(_) => 2,
            ServiceError::Runtime(_) => 3,
        }
    }
}

impl From<guidewalk_core::Error> for ServiceError {
    fn from(e: guidewalk_core::Error) -> Self {
        if e.is_validation() {
            ServiceError::Validation(e.to_string())
        } else {
            ServiceError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        ServiceError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for ServiceError {
    fn from(e: serde_json::Error) -> Self {
        ServiceError::Runtime(e.to_string())
    }
}
