use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("fixed Cholesky entry L[{row},{col}] is {got}, expected fixed value {expected}")]
    FixedEntryViolation {
        row: usize,
        col: usize,
        expected: f64,
        got: f64,
    },

    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate variance {value:e} for differenced utility {index}")]
    DegenerateVariance { index: usize, value: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("singular matrix in {0}")]
    Singular(String),

    #[error("matrix is not positive semidefinite (minimum eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("Lagrange multiplier solve left residual {residual:e} after {iterations} iterations")]
    ElNotConverged { residual: f64, iterations: usize },

    #[error("line search failed: {0}")]
    LineSearch(String),

    #[error("fits are not comparable: {0}")]
    Mismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that stem from the numerics rather than from the
    /// caller's input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateVariance { .. }
                | Error::NonFinite(_)
                | Error::Singular(_)
                | Error::NotPsd(_)
                | Error::ElNotConverged { .. }
                | Error::LineSearch(_)
        )
    }
}
