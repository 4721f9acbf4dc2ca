use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient nulls: {available} inliers cannot cover a mirror set of {m} plus train and calibration")]
    InsufficientNulls { available: usize, m: usize },

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("non-finite feature value at row {row}, column `{column}`")]
    NonFiniteFeature { row: usize, column: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("binary classifier requires labeled outliers, none were supplied")]
    MissingOutliers,

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("transductive classifier requires a nonempty pool")]
    EmptyPool,

    #[error("weight at unit {index} is not strictly positive ({value})")]
    NonPositiveWeight { index: usize, value: f64 },

    #[error("side information variant does not match the requested weight matrix kind")]
    VariantMismatch,

    #[error("sparsity level at unit {index} is outside (0, 1): {value}")]
    PiOutOfRange { index: usize, value: f64 },

    #[error("every candidate in the toolbox failed to fit")]
    AllCandidatesFailed,

    #[error("{failed} of {reps} replications failed (limit is 5%); first failure: {first}")]
    TooManyFailures {
        failed: usize,
        reps: usize,
        first: String,
    },

    #[error("no test rows")]
    NoTestRows,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Statistical or runtime failures, as opposed to bad user input.
    pub fn is_runtime_failure(&self) -> bool {
        matches!(
            self,
            Error::TooManyFailures { .. } | Error::AllCandidatesFailed
        )
    }
}
