use thiserror::Error;

pub type Result<T, E = SsmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SsmError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("singular resolvent at frequency bin {bin} (|denominator| = {magnitude:.3e})")]
    SingularResolvent { bin: usize, magnitude: f64 },

    #[error("closed-loop head K is required but missing")]
    MissingK,

    #[error("system is not controllable: Krylov singular-value ratio {ratio:.3e} is below {threshold:.0e}")]
    NotControllable { ratio: f64, threshold: f64 },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("process diverged at index {index}: {reason}")]
    Diverged { index: usize, reason: String },

    #[error("degenerate feature {feature}: zero variance on the training slice")]
    ZeroVariance { feature: usize },

    #[error("column `{missing}` not found; available columns: {available:?}")]
    MissingColumn {
        missing: String,
        available: Vec<String>,
    },

    #[error("row {row}, column `{column}`: cannot parse {value:?} as a number")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SsmError {
    pub(crate) fn invalid(arg: &'static str, reason: impl Into<String>) -> Self {
        SsmError::InvalidArgument {
            arg,
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(SsmError::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}

pub(crate) fn check_finite(context: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SsmError::NonFinite(context))
    }
}
