use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm is at or below {eps:e}{}", row.map(|r| format!(" (row {r})")).unwrap_or_default())]
    NearZeroNorm { row: Option<usize>, eps: f64 },

    #[error("scale alpha must be positive, got {0}")]
    NonPositiveAlpha(f64),

    #[error("alpha must be non-negative, got {0}")]
    NegativeAlpha(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid class count {count}: {reason}")]
    InvalidClassCount { count: usize, reason: &'static str },

    #[error("probability must lie strictly inside (0, 1), got {0}")]
    InvalidProbability(f64),

    #[error("detection score must lie strictly inside (0, 1), got {0}")]
    ProbabilityOutOfRange(f64),

    #[error("vector is not unit length (norm {norm})")]
    NotUnitVector { norm: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("loss diverged (non-finite) at iteration {iteration}")]
    DivergedLoss { iteration: usize },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("template has no media items")]
    EmptyTemplate,

    #[error("template `{0}` not found")]
    MissingTemplate(String),

    #[error("ROC needs at least one match and one non-match score")]
    DegenerateLabels,

    #[error("probe template `{0}` has no mate in the gallery (closed-set protocol)")]
    ProbeWithoutMate(String),

    #[error("open-set evaluation needs at least one non-mated probe")]
    NoNonMatedProbes,

    #[error("open-set evaluation needs at least one mated probe")]
    NoMatedProbes,

    #[error("bin edges must be strictly increasing")]
    InvalidBinEdges,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("config key `{key}`: {reason}")]
    ConfigValue { key: String, reason: String },

    #[error("line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },

    #[error("line {line}: expected feature dimension {expected}, found {got}")]
    InconsistentDimension {
        line: usize,
        expected: usize,
        got: usize,
    },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("bad IDX magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated file {path}: {reason}")]
    TruncatedFile { path: PathBuf, reason: String },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input (bad arguments, malformed
    /// files, out-of-range settings) as opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::DivergedLoss { .. } | Error::NonFinite(_)
        )
    }
}
