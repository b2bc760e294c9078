use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A point or argument lies outside the domain where an evaluator is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed arguments (dimension mismatch, non-positive sizes, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A documented precondition of an operation does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A function that should factor through block norms does not.
    #[error("symmetry violation: {0}")]
    SymmetryViolation(String),

    /// Linear solve failure, positivity loss, blow-up, NaN.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A self-check on a computed object failed.
    #[error("validation failed: {0}")]
    Validation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
