use thiserror::Error;

pub type Result<T, E = ForgeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value in {layer}")]
    Numeric { layer: String },
    #[error("degenerate sample after {attempts} attempts: {what}")]
    DegenerateSample { attempts: usize, what: String },
    #[error("unknown group tag `{0}`")]
    UnknownGroup(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("only one class present in {0}")]
    SingleClass(String),
    #[error("undefined statistic: {0}")]
    Undefined(String),
    #[error("missing data: {0}")]
    Missing(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported checkpoint version {0}")]
    UnknownVersion(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ForgeError {
    /// Stable machine-readable tag, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            ForgeError::Config(_) => "config",
            ForgeError::Dimension(_) => "dimension",
            ForgeError::Numeric { .. } => "numeric",
            ForgeError::DegenerateSample { .. } => "degenerate_sample",
            ForgeError::UnknownGroup(_) => "unknown_group",
            ForgeError::Empty(_) => "empty",
            ForgeError::LengthMismatch { .. } => "length_mismatch",
            ForgeError::OutOfRange(_) => "out_of_range",
            ForgeError::SingleClass(_) => "single_class",
            ForgeError::Undefined(_) => "undefined",
            ForgeError::Missing(_) => "missing",
            ForgeError::Schema(_) => "schema",
            ForgeError::Format(_) => "format",
            ForgeError::Truncated { .. } => "truncated",
            ForgeError::UnknownVersion(_) => "unknown_version",
            ForgeError::Io(_) => "io",
            ForgeError::Csv(_) => "csv",
            ForgeError::Json(_) => "json",
        }
    }
}

pub(crate) fn ensure_len(left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(ForgeError::LengthMismatch { left, right });
    }
    Ok(())
}
