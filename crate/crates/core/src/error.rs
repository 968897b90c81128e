use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("ingest error at row {row}, column `{column}`: {message}")]
    Ingest {
        /// 1-based data row (header excluded); 0 when the error concerns the header.
        row: usize,
        column: String,
        message: String,
    },

    #[error("materialization error: {0}")]
    Materialize(String),

    #[error("singular design (condition estimate {condition:.3e})")]
    SingularDesign { condition: f64 },

    #[error("separation detected: {0}")]
    Separation(String),

    #[error("optimizer did not converge after {iterations} iterations (gradient max-norm {gradient:.3e})")]
    NonConvergence { iterations: usize, gradient: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("functional `{0}` has no registered sufficient-statistic decomposition")]
    UnsupportedForLossless(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("engine error: {0}")]
    Engine(String),

    #[error("budget expired before any unit of work completed")]
    BudgetTooSmall,

    #[error("at least 2 draws are required, got {0}")]
    InsufficientDraws(usize),

    #[error("cannot combine summaries: {0}")]
    Combine(String),

    #[error("reference interval has zero length on coordinate {0}")]
    DegenerateReference(usize),

    #[error("baseline error: {0}")]
    Baseline(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
