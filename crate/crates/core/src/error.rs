use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot open {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed CSV in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("column `{name}` not found in header")]
    MissingColumn { name: String },

    #[error("column `{name}` appears more than once in header")]
    DuplicateColumn { name: String },

    #[error("row {row}, column `{column}`: value `{value}` is not numeric")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}, column `{column}`: missing value")]
    MissingValue { row: usize, column: String },

    #[error("exposure not binary: row {row} has value {value}")]
    ExposureNotBinary { row: usize, value: f64 },

    #[error("column `{column}` is tagged binary but row {row} has value {value}")]
    BinaryColumnViolation {
        column: String,
        row: usize,
        value: f64,
    },

    #[error("exposure is constant (all units have A = {value})")]
    ConstantExposure { value: u8 },

    #[error("no unexposed units")]
    NoUnexposed,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("positivity violation: propensity score {value} at unit {index}")]
    Positivity { index: usize, value: f64 },

    #[error("total weight of the {group} group is zero")]
    ZeroGroupWeight { group: &'static str },

    #[error("fold {fold} has no {class} units")]
    FoldMissingClass { fold: usize, class: &'static str },

    #[error(
        "basis expansion would produce {columns} columns (cap {cap}); \
         switch to the quantile knot rule, lower knots_per_cov or reduce max_degree"
    )]
    ColumnCap { columns: usize, cap: usize },

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
