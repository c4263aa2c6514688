use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    LossNotScalar(Vec<usize>),

    #[error("loss tensor is not recorded on this tape")]
    DetachedLoss,

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("config: {field}: {message}")]
    Config { field: String, message: String },

    #[error("vocab: {0}")]
    Vocab(String),

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("unknown grammar `{0}`")]
    UnknownGrammar(String),

    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: usize, what: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("diagnostics: {0}")]
    Diagnostics(String),

    #[error("finetune: {0}")]
    Finetune(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
