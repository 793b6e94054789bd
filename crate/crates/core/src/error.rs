use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("input too short for encoder: got {got} time steps, need at least {min}")]
    InputTooShort { got: usize, min: usize },

    #[error("recording `{name}` has {len} time steps, shorter than window of {window}")]
    EmptyInput { name: String, len: usize, window: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("index {index} out of range for batch of {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("prediction horizon {k} outside configured range 1..={horizon}")]
    HorizonOutOfRange { k: usize, horizon: usize },

    #[error("contrastive loss needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),

    #[error("synthetic generator failed its separability check: probe accuracy {accuracy:.2}% < {required:.2}%")]
    Separability { accuracy: f64, required: f64 },

    #[error("dataset split is empty: {0}")]
    EmptySplit(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("attempted gradient update on frozen parameters `{0}`")]
    FrozenUpdate(String),

    #[error("training diverged at {stage}: {detail}")]
    Diverged { stage: String, detail: String },

    #[error("statistical test undefined: {0}")]
    UndefinedTest(String),

    #[error("missing input {what}; {hint}")]
    MissingInput { what: String, hint: String },

    #[error("malformed {what} at {path}: {detail}")]
    Format {
        what: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
