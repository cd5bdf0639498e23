use alloc::string::String;

/// Errors raised by the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    /// A classification row is not a probability simplex.
    #[error(
        "{split} split, instance {instance}, model {model}: class probabilities sum to {sum} (expected 1 within 1e-4)"
    )]
    Simplex {
        split: String,
        instance: usize,
        model: usize,
        sum: f64,
    },
    #[error("validation failed: {0}")]
    Validation(String),
    /// Training produced a non-finite loss or gradient.
    #[error("numeric failure at step {step}: {detail}")]
    Numeric { step: usize, detail: String },
}

pub type Result<T> = core::result::Result<T, Error>;
