use thiserror::Error;

/// Every fallible operation in the crate returns this error.
#[derive(Debug, Error)]
pub enum Error {
    /// Arrays whose shapes disagree with the declared dimension.
    #[error("structural error: {0}")]
    Structural(String),

    /// Curvature data that violates one or more identities.
    #[error("validation failed: {0}")]
    Validation(String),

    /// Input outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A tolerance could not be reached within the evaluation budget.
    #[error("budget exhausted: {msg} (best estimate {best:e}, error estimate {error:e})")]
    Budget { msg: String, best: f64, error: f64 },

    /// A linear solve or iteration that did not deliver the required accuracy.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A Monte Carlo integrand produced a non-finite value.
    #[error("non-finite integrand value at {point:?}")]
    Poisoned { point: Vec<f64> },

    /// The reduced functional has no critical point at this boundary point.
    #[error("no critical point at {label}: {reason}")]
    NoCriticalPoint { label: String, reason: String },

    /// No admissible boundary point exists in the table.
    #[error("construction impossible: {0}")]
    ConstructionImpossible(String),

    #[error("unknown point label {0:?}")]
    UnknownLabel(String),

    /// A computed quantity broke an invariant the theory guarantees.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
