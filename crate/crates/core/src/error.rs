use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),

    #[error("non-numeric value `{value}` in column `{column}` (row {row})")]
    NonNumeric {
        column: String,
        row: usize,
        value: String,
    },

    #[error("invalid status `{value}` at row {row}: expected 0 or 1")]
    InvalidStatus { row: usize, value: String },

    #[error("no failures observed: every subject is censored")]
    AllCensored,

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("value {0} lies outside [0, 1]")]
    Domain(f64),

    #[error("invalid ANOVA structure: {0}")]
    Structure(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("every fit failed: {0}")]
    AllFitsFailed(String),
}

pub type Result<T> = std::result::Result<T, Error>;
