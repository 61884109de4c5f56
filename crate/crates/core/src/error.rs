use thiserror::Error;

pub type Result<T, E = SlamError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SlamError {
    #[error("steering angle {0} rad is outside (-pi/2, pi/2)")]
    InvalidSteering(f64),
    #[error("wheel-to-axle velocity transform is singular for steering {alpha} rad (denominator {denominator})")]
    SingularVelocityTransform { alpha: f64, denominator: f64 },
    #[error("landmark coincides with the sensor position; range-bearing is undefined")]
    ZeroRange,
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("solver diverged: {0}")]
    Divergence(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for SlamError {
    fn from(e: std::io::Error) -> Self {
        SlamError::Io(e.to_string())
    }
}
