use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): corners must be finite with x1 <= x2 and y1 <= y2")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("invalid grid box ({x1}, {y1}, {x2}, {y2}): coordinates must lie in [0, 1000] with x1 <= x2 and y1 <= y2")]
    InvalidGridBox { x1: u16, y1: u16, x2: u16, y2: u16 },

    #[error("{name} = {value} is out of range, expected {expected}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("{name} weights sum to {sum}, expected 1")]
    WeightsNotNormalized { name: &'static str, sum: f64 },

    #[error("image dimensions must be positive, got {width}x{height}")]
    InvalidImageSize { width: f64, height: f64 },

    #[error("class name must not be empty")]
    EmptyClassName,

    #[error("cannot render response: {0}")]
    Render(String),

    #[error("group of size {0} is too small, at least 2 samples are required")]
    GroupTooSmall(usize),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
