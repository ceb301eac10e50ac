use std::io;

/// Errors produced by the tensor engine, the masked layers, the compiler and
/// the training / analysis drivers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A pruning stage was requested after the last legal stage.
    #[error("stage overflow: {0}")]
    StageOverflow(String),

    /// Compilation requires every masked layer to have finished its schedule.
    #[error("not fully sparsified: {0}")]
    NotSparsified(String),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    /// Malformed binary container, dataset record or CSV.
    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
