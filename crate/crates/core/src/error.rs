use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape")]
    TapeConsumed,

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("container parse error at byte {offset}: {kind}")]
    Container { offset: usize, kind: ContainerErrorKind },

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("protocol: {0}")]
    Protocol(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {detail}")]
    Json { path: String, detail: String },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContainerErrorKind {
    BadMagic([u8; 4]),
    UnsupportedVersion(u16),
    Truncated { needed: usize, available: usize },
    TrailingBytes(usize),
    InvalidLabel(u8),
    InvalidUtf8,
    ZeroDimension,
    DimensionMismatch(String),
}

impl std::fmt::Display for ContainerErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::BadMagic(m) => write!(f, "bad magic {m:?}"),
            Self::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            Self::Truncated { needed, available } => {
                write!(f, "truncated payload (needed {needed} bytes, {available} available)")
            }
            Self::TrailingBytes(n) => write!(f, "{n} trailing bytes after declared payload"),
            Self::InvalidLabel(l) => write!(f, "invalid label {l}"),
            Self::InvalidUtf8 => write!(f, "invalid UTF-8 in string field"),
            Self::ZeroDimension => write!(f, "zero dimension"),
            Self::DimensionMismatch(s) => write!(f, "dimension mismatch: {s}"),
        }
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Shape { op, detail: detail.into() }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Short stable identifier used in machine-parsable CLI errors.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Shape { .. } => "shape",
            Self::Domain { .. } => "domain",
            Self::NonFinite(_) => "non_finite",
            Self::NonScalarLoss(_) => "non_scalar_loss",
            Self::TapeConsumed => "tape_consumed",
            Self::UnknownParam(_) => "unknown_param",
            Self::DuplicateParam(_) => "duplicate_param",
            Self::Config(_) => "config",
            Self::Container { .. } => "container",
            Self::Metrics(_) => "metrics",
            Self::Protocol(_) => "protocol",
            Self::Diverged { .. } => "diverged",
            Self::Empty(_) => "empty",
            Self::Io { .. } => "io",
            Self::Json { .. } => "json",
            Self::Csv(_) => "csv",
        }
    }
}
