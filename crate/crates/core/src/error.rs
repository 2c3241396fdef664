use thiserror::Error;

/// Error taxonomy shared by every module.
///
/// `Shape` and `Domain` are argument-level failures, `Contract` is a violated
/// precondition or type invariant, `Numeric` is a runtime numerical failure
/// (divergence, non-finite gradients, no eigensolver convergence).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
