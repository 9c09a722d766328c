use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FlowError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("resolution too small: {axis} has {cells} cells, need at least {min}")]
    ResolutionTooSmall { axis: usize, cells: usize, min: usize },

    #[error("wrap-shift constraint unsatisfiable: {0}")]
    WrapShift(String),

    #[error("unknown geometry kind `{0}`")]
    UnknownKind(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value {value} at cell {cell}")]
    NonFinite { cell: usize, value: f64 },

    #[error("fields live on different geometries")]
    GeometryMismatch,

    #[error("operation `{op}` is not defined on {kind}")]
    WrongKind { op: &'static str, kind: &'static str },

    /// Overflow of a conformal factor; a scientific outcome rather than a bug.
    #[error("blow-up at cell {cell}: lambda = {lambda}")]
    BlowUp { cell: usize, lambda: f64 },

    #[error("conjugate gradient did not converge: relative residual {residual:e} after {iterations} iterations")]
    SolverDiverged { iterations: usize, residual: f64 },

    #[error("curvature is not spatially constant: relative std {rel_std:e} (mean {mean})")]
    NotConstant { mean: f64, rel_std: f64 },

    #[error("conformal factor must be positive, got {0}")]
    NonPositive(f64),

    #[error("the origin of the Heisenberg group is outside the domain of the inversion")]
    Origin,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FlowError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FlowError::Io {
            path: path.into(),
            source,
        }
    }
}
