use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid generator config: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced at {location}")]
    NonFinite { location: String },

    #[error("w_avg has not been estimated for this model")]
    MissingWAvg,

    #[error("fingerprint mismatch: stats were estimated on {expected}, got {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("no layer {layer} channel {channel} in this trace")]
    InvalidPosition { layer: usize, channel: usize },

    #[error("invalid tensor container")]
    Container(#[from] ContainerError),

    #[error("stats file corrupt at byte {offset}: {reason}")]
    StatsParse { offset: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}

/// Failures while reading or writing a tensor container.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContainerError {
    #[error("bad magic bytes")]
    BadMagic,

    #[error("unsupported format version {0:?}")]
    VersionMismatch(String),

    #[error("manifest parse error at byte {offset}: {reason}")]
    Manifest { offset: usize, reason: String },

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("tensor {0} listed more than once")]
    DuplicateTensor(String),

    #[error("unexpected tensor {0}")]
    UnknownTensor(String),

    #[error("tensor {name} has dtype {dtype}, only f32 is supported")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("tensor {name}: byte length {length} does not match shape")]
    LengthMismatch { name: String, length: u64 },

    #[error("tensor {name}: offset {offset} is not 8-byte aligned")]
    Misaligned { name: String, offset: u64 },

    #[error("tensor {name}: range {offset}+{length} exceeds body of {body_len} bytes")]
    OutOfBounds { name: String, offset: u64, length: u64, body_len: u64 },

    #[error("tensors {first} and {second} overlap")]
    OverlappingRanges { first: String, second: String },

    #[error("tensor {0} contains non-finite values")]
    NonFinite(String),

    #[error("embedded config rejected: {0}")]
    Config(String),
}
