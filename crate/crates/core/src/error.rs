use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AlopeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AlopeError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layer index {index} is out of range for a model with {n_layers} layers")]
    LayerOutOfRange { index: i64, n_layers: usize },

    #[error("unknown LoRA target `{name}`; valid targets are: {}", valid.join(", "))]
    UnknownTarget { name: String, valid: Vec<String> },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: u64,
        msg: String,
    },

    #[error("{path}:{line}: score {score} outside [{min}, {max}]")]
    ScoreOutOfRange {
        path: String,
        line: u64,
        score: f64,
        min: f64,
        max: f64,
    },

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("non-finite loss at step {step} (lr {lr}, grad norm {grad_norm})")]
    NonFinite { step: usize, lr: f64, grad_norm: f64 },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("degenerate Williams test input: {0}")]
    Degenerate(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AlopeError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        AlopeError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        AlopeError::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AlopeError::Io {
            path: path.into(),
            source,
        }
    }
}
