use thiserror::Error;

/// Errors raised while loading data or fitting a model.
#[derive(Debug, Error)]
pub enum BivasError {
    #[error("non-numeric value {value:?} in column {column:?} (row {row})")]
    NonNumeric { column: String, row: usize, value: String },

    #[error("NaN or infinite value in {what}")]
    NaNPresent { what: String },

    #[error("covariate matrix Z is rank deficient (smallest/largest Gram eigenvalue {ratio:e})")]
    RankDeficientZ { ratio: f64 },

    #[error("group {group:?} has no members")]
    EmptyGroup { group: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid count: {0}")]
    InvalidCount(String),

    #[error("fdr threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),

    #[error("labels are degenerate: need at least one positive and one negative")]
    DegenerateLabels,

    #[error("instance too large for exhaustive enumeration: {0}")]
    TooLarge(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("grid point {index} (pi = {pi}) failed: {source}")]
    GridPoint {
        index: usize,
        pi: f64,
        #[source]
        source: Box<BivasError>,
    },

    #[error("missing column {0:?}")]
    MissingColumn(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl BivasError {
    /// True for failures caused by the filesystem or by unreadable files rather than by the data.
    pub fn is_io(&self) -> bool {
        match self {
            BivasError::Io(_) => true,
            BivasError::Csv(e) => matches!(e.kind(), csv::ErrorKind::Io(_)),
            BivasError::GridPoint { source, .. } => source.is_io(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, BivasError>;
