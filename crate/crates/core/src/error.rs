use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PrnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PrnError {
    #[error("degenerate shape: cross-covariance singular values {sigma:?} do not determine a unique rotation")]
    DegenerateShape { sigma: [f64; 3] },

    #[error("alignment did not converge after {iterations} sweeps (relative decrease {relative_decrease:e})")]
    NoConvergence {
        iterations: usize,
        relative_decrease: f64,
    },

    #[error("alignment state is not converged (stationarity {stationarity:e})")]
    NotConverged { stationarity: f64 },

    #[error("rotation system is singular: {null_dim} near-zero singular values, at most 3 expected")]
    SingularSystem { null_dim: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("batch of {got} samples is too small for batch-norm training (need at least 2)")]
    BatchTooSmall { got: usize },

    #[error("forward trace does not match gradient: {0}")]
    TraceMismatch(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("ground truth shape has zero norm")]
    ZeroGroundTruth,

    #[error("dataset frame {frame} has no 3D ground truth")]
    MissingGroundTruth { frame: usize },

    #[error("non-finite loss at iteration {iter} (group {group}): {detail}")]
    NonFiniteLoss {
        iter: usize,
        group: usize,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PrnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PrnError::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by the files, configurations or arguments handed in, as opposed
    /// to failures during computation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            PrnError::Io { .. }
                | PrnError::Json(_)
                | PrnError::Schema(_)
                | PrnError::InvalidSpec(_)
                | PrnError::InvalidConfig(_)
                | PrnError::InsufficientData(_)
                | PrnError::MissingGroundTruth { .. }
                | PrnError::DimensionMismatch(_)
        )
    }
}
