use thiserror::Error;

pub type Result<T> = std::result::Result<T, FemtoError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemtoError {
    /// A tensor axis did not have the size an operation needs.
    #[error("dimension mismatch on {axis} in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: [usize; 4],
        right: [usize; 4],
    },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Operation needs a batch-norm in a different mode.
    #[error("mode error: {0}")]
    Mode(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("archive error at offset {offset}: {msg}")]
    Archive { offset: usize, msg: String },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("negative power: baseline energy exceeds model energy ({0} W)")]
    NegativePower(f64),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for FemtoError {
    fn from(e: std::io::Error) -> Self {
        FemtoError::Io(e.to_string())
    }
}
