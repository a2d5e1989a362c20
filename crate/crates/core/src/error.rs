use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("non-triangle face at byte {offset} ({arity} vertices)")]
    NonTriangleFace { offset: u64, arity: usize },

    #[error("vertex index {index} out of range (n = {count}) at byte {offset}")]
    IndexOutOfRange { offset: u64, index: i64, count: usize },

    #[error("degenerate face {face}: {reason}")]
    DegenerateFace { face: usize, reason: &'static str },

    #[error("vertex {vertex} is not referenced by any face")]
    UnreferencedVertex { vertex: usize },

    #[error("mesh has zero surface area")]
    ZeroArea,

    #[error("no face survives the vertex selection")]
    EmptySubmesh,

    #[error("invalid vertex subset: {0}")]
    InvalidSubset(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("eigensolver failed: {message} (attained residual {residual:.3e})")]
    Eigensolver { message: String, residual: f64 },

    #[error("non-manifold edge fan at vertex {vertex}")]
    NonManifold { vertex: usize },

    #[error("singular system (smallest singular value {smallest_singular_value:.3e})")]
    Singular { smallest_singular_value: f64 },

    #[error("zero-norm feature row at vertex {vertex}")]
    ZeroNormRow { vertex: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("infinite geodesic distance (disconnected mesh); restrict to one component")]
    InfiniteDistance,

    #[error("correspondence is not injective: target {target} used twice")]
    NonInjective { target: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("nothing remains after carving partiality")]
    EmptyRemainder,

    #[error("missing cache {path}; create it with `{command}`")]
    MissingCache { path: PathBuf, command: String },

    #[error("malformed container {path}: {message}")]
    Container { path: PathBuf, message: String },

    #[error("optimization diverged at iteration {iteration}: {message}")]
    Diverged { iteration: usize, message: String },

    #[error("cache directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn parse(offset: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn dims(context: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            found,
        }
    }

    /// Stable numeric code, shared with the C interface.
    pub fn code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::NonTriangleFace { .. }
            | Error::IndexOutOfRange { .. }
            | Error::Container { .. } => 2,
            Error::DegenerateFace { .. }
            | Error::UnreferencedVertex { .. }
            | Error::ZeroArea
            | Error::EmptySubmesh
            | Error::EmptyRemainder
            | Error::NonManifold { .. } => 3,
            Error::InvalidSubset(_)
            | Error::DimensionMismatch { .. }
            | Error::InvalidArgument(_)
            | Error::NonInjective { .. }
            | Error::Config(_) => 4,
            Error::Eigensolver { .. } | Error::Singular { .. } | Error::Diverged { .. } => 5,
            Error::ZeroNormRow { .. } | Error::NonFinite(_) | Error::InfiniteDistance => 6,
            Error::MissingCache { .. } | Error::Locked(_) => 7,
            Error::Io(_) | Error::Json(_) => 8,
        }
    }
}
