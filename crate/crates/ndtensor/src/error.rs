use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error: {what}")]
    BadShape { what: String },
    #[error("parameter error: {what}")]
    BadParameter { what: String },
    #[error("numeric error: {what}")]
    Numeric { what: String },
    #[error("state error: {what}")]
    BadState { what: String },
    #[error("checkpoint format error: {what}")]
    BadCheckpoint { what: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
