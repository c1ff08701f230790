use thiserror::Error;

/// Errors surfaced by scenario generation, training, scoring, and metrics.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A configuration field failed validation; carries the offending field.
    #[error("invalid config: {field}: {message}")]
    InvalidConfig { field: &'static str, message: String },

    /// An operation that requires data received none.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// Vector or matrix dimensions do not line up.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// Two aligned lists have different lengths.
    #[error("length mismatch: {context}: {left} vs {right}")]
    LengthMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    /// A class target lies outside [0, C).
    #[error("target class {target} out of range for {num_classes} outputs")]
    TargetOutOfRange { target: usize, num_classes: usize },

    /// A probability vector does not sum to 1 within tolerance.
    #[error("probabilities sum to {sum}, expected 1 within 1e-6")]
    NotNormalized { sum: f64 },

    /// Softmax or energy temperature must be strictly positive.
    #[error("temperature must be > 0, got {0}")]
    NonPositiveTemperature(f64),

    /// The pooled covariance cannot be inverted.
    #[error("covariance matrix is numerically singular")]
    SingularCovariance,

    /// Class statistics need at least one sample per class.
    #[error("class {0} has no samples")]
    ClassWithoutSamples(usize),

    /// A pseudo-label references an instance index outside the pool.
    #[error("pseudo-label references instance {index} but pool has {pool_size}")]
    DanglingInstanceRef { index: usize, pool_size: usize },

    /// Distance scores need fitted class statistics.
    #[error("score kind {0} requires class statistics")]
    MissingStats(&'static str),

    /// The probe set must contain both ID and OOD instances.
    #[error("probe set contains only one origin kind")]
    SingleOriginProbe,

    /// Pipeline state does not match the requested mode.
    #[error("mode/state mismatch: {0}")]
    ModeStateMismatch(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
