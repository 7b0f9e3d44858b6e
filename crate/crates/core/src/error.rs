use thiserror::Error;

pub type Result<T> = std::result::Result<T, BamError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BamError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("estimation failed: {0}")]
    Estimation(String),
}
