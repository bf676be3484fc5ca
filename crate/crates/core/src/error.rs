use thiserror::Error;

pub type Result<T> = std::result::Result<T, DizzyError>;

#[derive(Debug, Error)]
pub enum DizzyError {
    #[error("invalid dimension {n}: need at least 2 coordinates")]
    InvalidDimension { n: usize },

    #[error("invalid rotation pair ({a}, {b}) for dimension {n}")]
    InvalidPair { a: usize, b: usize, n: usize },

    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("cache does not match operator: {0}")]
    CacheMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("loss mask has no scored positions")]
    DegenerateMask,

    #[error("non-finite value produced at {stage}")]
    NumericOverflow { stage: String },

    #[error("non-finite gradient in parameter group `{group}`")]
    NonFiniteGradient { group: String },

    #[error("loss function is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DizzyError {
    pub(crate) fn shape(what: &'static str, expected: usize, actual: usize) -> Self {
        DizzyError::Shape {
            what,
            expected,
            actual,
        }
    }

    /// True for failures caused by the numbers themselves rather than by
    /// configuration or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            DizzyError::NumericOverflow { .. }
                | DizzyError::NonFiniteGradient { .. }
                | DizzyError::NonDeterministic { .. }
        )
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(DizzyError::shape(what, expected, actual))
    }
}
