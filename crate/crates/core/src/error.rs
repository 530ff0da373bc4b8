use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}: EC row is treated")]
    TreatedExternalControl { row: usize },

    #[error("row {row}, column `{column}`: expected 0 or 1, found {value}")]
    NotBinary {
        row: usize,
        column: String,
        value: f64,
    },

    #[error("row {row}, column `{column}`: non-finite value")]
    NonFinite { row: usize, column: String },

    #[error("empty dataset")]
    Empty,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("column {column} is constant and cannot be standardized")]
    ConstantColumn { column: usize },

    #[error("only {n_controls} RCT controls; need at least {required} to fit the control outcome model")]
    TooFewControls { n_controls: usize, required: usize },

    #[error("design matrix is rank deficient ({rows} rows, {cols} columns)")]
    RankDeficient { rows: usize, cols: usize },

    #[error("logistic regression needs both label classes")]
    SingleClass,

    #[error("outcome model did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("positivity failure: {0}")]
    Positivity(String),

    #[error("bias function is unidentifiable: sampling-score residuals are all zero")]
    Unidentifiable,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid point k={k}: {source}")]
    AtGridPoint {
        k: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{failed} of {total} replications failed (limit 5%)")]
    TooManyFailures { failed: usize, total: usize },
}

impl Error {
    /// True for failures caused by malformed input rather than by the numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Csv(_)
                | Error::Json(_)
                | Error::MissingColumn(_)
                | Error::NonNumeric { .. }
                | Error::TreatedExternalControl { .. }
                | Error::NotBinary { .. }
                | Error::NonFinite { .. }
                | Error::Empty
                | Error::Shape(_)
                | Error::ConstantColumn { .. }
                | Error::TooFewControls { .. }
                | Error::InvalidArgument(_)
        )
    }
}
