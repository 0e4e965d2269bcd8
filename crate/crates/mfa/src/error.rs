use thiserror::Error;

/// Errors produced by model construction, fitting, scoring, and I/O.
#[derive(Debug, Error)]
pub enum MfaError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("noise/precision diagonal entry {index} is not strictly positive: {value}")]
    NonPositiveDiagonal { index: usize, value: f64 },

    #[error("singular matrix: pivot {pivot:e} below threshold during elimination")]
    SingularMatrix { pivot: f64 },

    #[error("matrix is not positive-definite")]
    NotPositiveDefinite,

    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {diff:e} exceeds tolerance")]
    NotSymmetric { i: usize, j: usize, diff: f64 },

    #[error("indefinite precision: M_k has eigenvalue {eigenvalue} <= 0 for component {component}")]
    IndefinitePrecision { component: usize, eigenvalue: f64 },

    #[error("degenerate point: row {row} has zero density under every component")]
    DegeneratePoint { row: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("too few points: n = {n} but k = {k} components requested")]
    TooFewPoints { n: usize, k: usize },

    #[error("cluster too small for PPCA initialization: {size} point(s)")]
    ClusterTooSmall { size: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("model file format error: {0}")]
    ModelFormat(String),

    #[error("unsupported model file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MfaError>;
