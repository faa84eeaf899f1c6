use numcore::NumError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite attention logits in head {head}")]
    NanLogits { head: usize },
    #[error("non-finite loss at step {step}: {detail}")]
    NanLoss { step: usize, detail: String },
    #[error("config: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Param(msg.into()))
}

pub(crate) fn dim<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dim(msg.into()))
}
