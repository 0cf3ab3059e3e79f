use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported constellation order {0} (expected 4, 16 or 64)")]
    UnsupportedOrder(usize),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("symbol index {index} out of range for {order}-point constellation")]
    SymbolOutOfRange { index: usize, order: usize },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("matrix is not Hermitian (max |K - K^H| = {max_dev:e})")]
    NotHermitian { max_dev: f64 },

    #[error("indefinite detector state at iteration {iteration}, user {user}: {detail}")]
    IndefiniteState {
        iteration: usize,
        user: usize,
        detail: String,
    },

    #[error("exhaustive search over {count} hypotheses exceeds limit {limit}")]
    HypothesisLimit { count: f64, limit: usize },

    #[error("channel condition filter rejected {attempts} consecutive draws")]
    RetryExhausted { attempts: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
