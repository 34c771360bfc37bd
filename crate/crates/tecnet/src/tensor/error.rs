use thiserror::Error;

/// Errors raised by tensor construction and operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{axis} mismatch: {left} vs {right}")]
    AxisMismatch {
        axis: &'static str,
        left: usize,
        right: usize,
    },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("data length {got} does not match shape {shape:?} ({expected} elements)")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("expected rank-{expected} tensor, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("channel slice [{start}, {start}+{len}) out of range for {channels} channels")]
    ChannelRange {
        start: usize,
        len: usize,
        channels: usize,
    },
    #[error(
        "convolution output would be empty: input extent {input}, kernel {kernel}, \
         stride {stride}, dilation {dilation}, padding {padding}"
    )]
    EmptyConvOutput {
        input: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    },
    #[error("invalid convolution spec: {reason}")]
    InvalidConvSpec { reason: String },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
}

pub type TensorResult<T> = Result<T, TensorError>;
