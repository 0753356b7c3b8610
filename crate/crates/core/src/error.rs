use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("data length {got} does not match declared shape (expected {expected})")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite value {value} at {index}")]
    NonFinite { index: String, value: f64 },

    #[error("negative value {value} at {index}")]
    Negative { index: String, value: f64 },

    #[error("class id {id} at pixel {pixel} is out of range for {num_classes} classes")]
    ClassOutOfRange { id: u32, pixel: usize, num_classes: usize },

    #[error("invalid scale {scale} for {height}x{width} source")]
    InvalidScale { scale: usize, height: usize, width: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed {kind} data: {msg}")]
    Format { kind: &'static str, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
