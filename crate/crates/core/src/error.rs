use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed schema {}: {detail}", .path.display())]
    MalformedSchema { path: PathBuf, detail: String },

    #[error("relation {relation} references undeclared type `{type_name}`")]
    UnknownTypeReference { relation: String, type_name: String },

    #[error("spatial type `{0}` must declare x_column and y_column")]
    SpatialColumnsMissing(String),

    #[error("entity type `{0}` declared more than once")]
    DuplicateTypeName(String),

    #[error("{}: missing column `{column}`", .file.display())]
    MissingColumn { file: PathBuf, column: String },

    #[error("{}: {detail}", .file.display())]
    MalformedData { file: PathBuf, detail: String },

    #[error("bounding box is degenerate")]
    DegenerateBbox,

    #[error("spatial token `{id}` of type `{type_name}` is referenced by a relation but has no coordinates")]
    DanglingSpatialToken { type_name: String, id: String },

    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),

    #[error("region contains no spatial tokens")]
    EmptyRegion,

    #[error("format mismatch in {what}: expected {expected}, found {found}")]
    VersionMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFiniteValue(String),

    #[error("backward requires a 1x1 loss, got {rows}x{cols}")]
    NotScalarLoss { rows: usize, cols: usize },

    #[error("graph has no tokens")]
    EmptyGraph,

    #[error("batch too small: need at least {needed}, got {got}")]
    BatchTooSmall { needed: usize, got: usize },

    #[error("normal equations are singular")]
    SingularSystem,

    #[error("region sampler rejected {0} consecutive boundaries")]
    SamplerExhausted(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at step {step}: {detail}")]
    TrainingDiverged { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the failure stems from numerics rather than input data.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::ShapeMismatch { .. }
                | Error::NonFiniteValue(_)
                | Error::NotScalarLoss { .. }
                | Error::SingularSystem
                | Error::TrainingDiverged { .. }
        )
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
