use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (jitter escalated to {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },
    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("singular triangular factor: diagonal entry {index} is zero")]
    SingularMatrix { index: usize },
    #[error("evaluation produced a non-finite value")]
    NonFiniteOutput,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid category {value} for cardinality {cardinality}")]
    InvalidCategory { value: f64, cardinality: usize },
    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("support violation: q has mass on category {0} where p is zero")]
    SupportViolation(usize),
    #[error("joint categorical enumeration of {size} assignments exceeds cap {cap}")]
    EnumerationOverflow { size: usize, cap: usize },
    #[error("dense computation refused: {n} rows exceed the limit of {limit}")]
    SizeGuard { n: usize, limit: usize },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("no held-out ground truth for {0}")]
    MissingGroundTruth(String),
    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("missing rate must lie in [0, 1), got {0}")]
    Rate(f64),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse { row: usize, column: String, message: String },
    #[error("too few instances: {0}")]
    TooFewInstances(String),
    #[error("unknown parameter `{0}`")]
    MissingParameter(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Whether the error stems from numerics rather than inputs or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::SingularMatrix { .. }
                | Error::NonFiniteOutput
                | Error::NonFiniteLoss { .. }
        )
    }
}
