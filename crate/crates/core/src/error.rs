use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: degenerate input ({detail})")]
    Degenerate { op: &'static str, detail: String },

    #[error("{op}: value {value} outside the function domain")]
    Domain { op: &'static str, value: f64 },

    #[error("{0}: empty sequence")]
    EmptySequence(&'static str),

    #[error("token id {token} is out of vocabulary (size {vocab_size})")]
    OutOfVocab { token: u32, vocab_size: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("non-finite loss at epoch {epoch}, step {step} ({component})")]
    NonFinite {
        epoch: usize,
        step: usize,
        component: String,
        diagnostic: Box<crate::train::Diagnostic>,
    },

    #[error("gradient check aborted: non-finite evaluation at {0}")]
    GradCheck(String),

    #[error("malformed {kind} file: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn format(kind: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            kind,
            detail: detail.into(),
        }
    }
}
