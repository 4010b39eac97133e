use crate::C64;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, DampkitError>;

#[derive(Debug, Error)]
pub enum DampkitError {
    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("undamped frequencies are not distinct: |omega[{i}] - omega[{j}]| <= {tol:e}")]
    RepeatedFrequencies { i: usize, j: usize, tol: f64 },

    #[error("2x2 modal block {index} is defective (alpha = 2 makes the block non-diagonalizable)")]
    DefectiveBlock { index: usize },

    #[error("evaluation at a pole: lambda coincides with diagonal entry {index}")]
    Pole { index: usize },

    #[error(
        "DPR1 iteration failed to converge for eigenvalue {failed_at} of {size} \
         (step size exhausted); {} eigenvalues were found",
        partial.len()
    )]
    NonConvergence {
        failed_at: usize,
        size: usize,
        partial: Vec<C64>,
    },

    #[error("QEP stage {stage} failed: {source}")]
    StageFailed {
        stage: usize,
        #[source]
        source: Box<DampkitError>,
    },

    #[error("gradient undefined: {0}")]
    GradientUndefined(String),

    #[error("empty spectrum")]
    EmptySpectrum,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("eigenvalue matching failed: {0}")]
    MatchingFailed(String),

    #[error("solver error: {0}")]
    Solver(String),

    #[error("linear algebra backend error: {0}")]
    Linalg(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<ndarray_linalg::error::LinalgError> for DampkitError {
    fn from(e: ndarray_linalg::error::LinalgError) -> Self {
        DampkitError::Linalg(e.to_string())
    }
}
