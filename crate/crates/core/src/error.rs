use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch in {factor}: expected {expected}, found {found}")]
    Dimension {
        factor: &'static str,
        expected: String,
        found: String,
    },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("materialized pilot matrix would hold {entries} entries (cap {cap}); use the operator form")]
    MemoryBudget { entries: usize, cap: usize },

    #[error("angle undefined: base station and user positions coincide")]
    UndefinedAngle,

    #[error("could not draw resolvable path delays after {0} attempts")]
    Unresolvable(usize),

    #[error("ADMM diverged at iteration {iteration}: primal residual {residual:.3e}")]
    Diverged { iteration: usize, residual: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn dim_err(factor: &'static str, expected: impl ToString, found: impl ToString) -> Error {
    Error::Dimension {
        factor,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}
