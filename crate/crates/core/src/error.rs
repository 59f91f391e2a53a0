use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{what} index {index} out of range (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("non-finite value in `{context}`")]
    NonFinite { context: String },

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("{what} has length {len}, exceeding the maximum {max}")]
    Length {
        what: String,
        len: usize,
        max: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("no occurrences for entity `{0}`")]
    NoOccurrences(String),

    #[error("degenerate direction: summed representations have zero norm")]
    DegenerateDirection,

    #[error("fingerprint mismatch: table built for {table}, checkpoint is {checkpoint}")]
    FingerprintMismatch { table: String, checkpoint: String },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
