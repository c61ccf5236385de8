use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the reconstruction stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input: {0}")]
    MalformedInput(String),

    #[error("cannot parse value at row {row}, column {col}: {text:?}")]
    Parse { row: usize, col: usize, text: String },

    #[error("measurement matrix is already centered")]
    AlreadyCentered,

    #[error("measurement matrix must be centered first")]
    NotCentered,

    #[error("rank 3K = {requested} exceeds min(2F, P) = {available}")]
    RankTooLarge { requested: usize, available: usize },

    #[error("constraint system has no usable solution space")]
    NoSolutionSpace,

    #[error("found {found} distinct corrective triplets, {needed} required")]
    InsufficientTriplets {
        found: usize,
        needed: usize,
        /// Clusters that were found, best first.
        partial: Vec<crate::factorization::CorrectiveTriplet>,
    },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("matrix is rank deficient and has no nearest rotation")]
    DegenerateProjection,

    #[error("frame {0} has a degenerate rotation candidate")]
    DegenerateFrame(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite iterate at ADMM iteration {0}")]
    NonFinite(usize),

    #[error("ground-truth frame {0} has zero norm")]
    DegenerateGroundTruth(usize),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
