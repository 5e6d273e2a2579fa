use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// Every variant maps to a stable string through [`Error::code`]; the CLI
/// prints that code so scripts can match on it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected \"{}\", found \"{}\"", expected.escape_ascii(), found.escape_ascii())]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid metadata: {0}")]
    Metadata(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("zero-norm vector in cosine similarity")]
    ZeroVector,
    #[error("empty input: {0}")]
    Empty(String),
    #[error("optimization diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("singular linear system; retry with ridge > 0")]
    Singular,
    #[error("target has zero variance and the map does not reproduce it")]
    ZeroVarianceTarget,
    #[error("unknown class {0}")]
    UnknownClass(String),
    #[error("heatmap kind {found} not accepted here (expected {expected})")]
    WrongKind { expected: &'static str, found: String },
    #[error("heatmap contains non-binary cells")]
    NonBinary,
    #[error("bundle has no oracle embeddings")]
    MissingOracle,
    #[error("class {0} is not covered by the detector profile")]
    UncoveredClass(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::BadMagic { .. } => "bad_magic",
            Error::BadVersion(_) => "bad_version",
            Error::Truncated(_) => "truncated",
            Error::NonFinite(_) => "non_finite",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::Metadata(_) => "bad_metadata",
            Error::Invariant(_) => "invariant",
            Error::ZeroVector => "zero_vector",
            Error::Empty(_) => "empty_set",
            Error::Diverged { .. } => "diverged",
            Error::Singular => "singular",
            Error::ZeroVarianceTarget => "zero_variance_target",
            Error::UnknownClass(_) => "unknown_class",
            Error::WrongKind { .. } => "wrong_kind",
            Error::NonBinary => "non_binary",
            Error::MissingOracle => "missing_oracle",
            Error::UncoveredClass(_) => "uncovered_class",
            Error::Config(_) => "config",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
