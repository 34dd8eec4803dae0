use thiserror::Error;

/// Errors produced by the tensor engine, the neck blocks and the harness.
#[derive(Error, Debug)]
pub enum CoreError {
    /// Tensor dimensions do not conform for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An argument is out of its documented range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A block configuration violates one of its invariants.
    #[error("configuration error: {0}")]
    Config(String),

    /// A NaN or infinity appeared where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Gradient check aborted (NaN in analytic or numeric gradient).
    #[error("gradient check failed for `{name}`: {reason}")]
    GradCheck { name: String, reason: String },

    /// Text-format parse failure, pointing at the offending line.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Record-level validation failure in an annotation or prediction file.
    #[error("validation error at line {line}: {message}")]
    Validation { line: usize, message: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {message}")]
    Divergence { step: usize, message: String },

    /// A required input file or directory is missing.
    #[error("missing input: {0}")]
    MissingInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
