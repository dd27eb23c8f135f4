use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: &'static str },

    #[error("invalid kernel size {0}: must be odd")]
    InvalidKernel(usize),

    #[error("invalid dropout rate {0}: must lie in [0, 1)")]
    InvalidRate(f64),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("layer is not deterministic under a frozen seed: {0}")]
    NonDeterministicLayer(String),

    #[error("bad image dimensions: expected {expected:?}, found {found:?}")]
    BadDimensions { expected: Vec<usize>, found: Vec<usize> },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error("unknown tensor name {0:?}")]
    UnknownTensorName(String),

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    DivergenceDetected { epoch: usize, batch: usize, loss: f64 },

    #[error("degenerate variance: Pearson correlation is undefined for a constant vector")]
    DegenerateVariance,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }
}
