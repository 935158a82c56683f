use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },

    #[error("label {label} at index {index} is out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("token {token} at position ({row}, {col}) is out of range for vocab size {vocab}")]
    TokenOutOfRange {
        row: usize,
        col: usize,
        token: u32,
        vocab: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("top-k selection requires 1 <= k <= {n}, got k = {k}")]
    TopK { k: usize, n: usize },

    #[error("operation requires hard masks, got soft masks")]
    SoftMasks,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    Version(u32),

    #[error("truncated input: {what} needs {needed} bytes, {available} available")]
    Truncated {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("{what} length mismatch: expected {expected}, got {actual}")]
    PayloadLength {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{mask} row {row} has {found} bits set, expected k = {expected}")]
    RowBitCount {
        mask: &'static str,
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("training diverged for profile {profile}: {source}")]
    ProfileDiverged {
        profile: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
