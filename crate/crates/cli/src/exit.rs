//! Exit codes and the JSON error record written to stderr.

use bpurf_core::Error;
use serde_json::{json, Value};

pub const OK: i32 = 0;
pub const USAGE: i32 = 2;
pub const DATA: i32 = 3;
pub const NUMERIC: i32 = 4;

/// Bad flags or flag combinations that clap cannot catch on its own.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Short machine name for a core error.
pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::MissingFile(_) => "missing_file",
        Error::MalformedSchema { .. } => "malformed_schema",
        Error::UnknownTypeReference { .. } => "unknown_type_reference",
        Error::SpatialColumnsMissing(_) => "spatial_columns_missing",
        Error::DuplicateTypeName(_) => "duplicate_type_name",
        Error::MissingColumn { .. } => "missing_column",
        Error::MalformedData { .. } => "malformed_data",
        Error::DegenerateBbox => "degenerate_bbox",
        Error::DanglingSpatialToken { .. } => "dangling_spatial_token",
        Error::InvalidPolygon(_) => "invalid_polygon",
        Error::EmptyRegion => "empty_region",
        Error::VersionMismatch { .. } => "version_mismatch",
        Error::ShapeMismatch { .. } => "shape_mismatch",
        Error::NonFiniteValue(_) => "non_finite_value",
        Error::NotScalarLoss { .. } => "not_scalar_loss",
        Error::EmptyGraph => "empty_graph",
        Error::BatchTooSmall { .. } => "batch_too_small",
        Error::SingularSystem => "singular_system",
        Error::SamplerExhausted(_) => "sampler_exhausted",
        Error::InvalidConfig(_) => "invalid_config",
        Error::TrainingDiverged { .. } => "training_diverged",
        Error::Io(_) => "io",
        Error::Csv(_) => "csv",
        Error::Json(_) => "json",
    }
}

/// Exit code and stderr record for a failed command.
pub fn classify(err: &anyhow::Error) -> (i32, Value) {
    let detail = format!("{err:#}");
    if let Some(u) = err.downcast_ref::<UsageError>() {
        return (USAGE, record("usage", &u.0, USAGE));
    }
    if let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) {
        let code = match e {
            _ if e.is_numeric() => NUMERIC,
            Error::InvalidConfig(_) => USAGE,
            _ => DATA,
        };
        return (code, record(error_kind(e), &detail, code));
    }
    if err.chain().any(|c| c.downcast_ref::<serde_json::Error>().is_some()) {
        return (DATA, record("json", &detail, DATA));
    }
    if err.chain().any(|c| c.downcast_ref::<std::io::Error>().is_some()) {
        return (DATA, record("io", &detail, DATA));
    }
    (DATA, record("error", &detail, DATA))
}

pub fn record(kind: &str, detail: &str, code: i32) -> Value {
    json!({"error": kind, "detail": detail, "exit_code": code})
}
