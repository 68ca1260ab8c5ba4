use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: index {index} out of bounds for size {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SeqLength { len: usize, max: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("field `{field}` mismatch: expected {expected}, found {found}")]
    Mismatch {
        field: String,
        expected: String,
        found: String,
    },

    #[error("{source_name}:{line}: {msg}")]
    Parse {
        source_name: String,
        line: usize,
        msg: String,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite loss at step {step} (lr {lr:e}); first non-finite parameter: {layer}")]
    NonFinite { step: usize, lr: f64, layer: String },

    #[error("non-ternary value {value} at ({row}, {col})")]
    NotTernary { row: usize, col: usize, value: f64 },

    #[error("unknown scene `{0}`")]
    UnknownScene(String),

    #[error("homography maps point ({x}, {y}) to infinity")]
    Projection { x: f64, y: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
