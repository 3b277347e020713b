use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("undefined predictive moment: posterior shape {shape} must exceed 1")]
    UndefinedMoment { shape: f64 },

    #[error("non-finite activation in layer {layer} at {stage}")]
    NonFinite { layer: usize, stage: &'static str },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config error{}: {msg}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config { msg: String, line: Option<usize> },

    #[error("checkpoint format error at offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("certificate failure: {0}")]
    Certificate(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: u64, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config {
            msg: msg.into(),
            line: None,
        }
    }
}
