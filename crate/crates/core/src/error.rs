use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("obstacle radius must be positive and finite, got {0}")]
    InvalidRadius(f64),
    #[error("horizon mismatch: expected {expected} samples, got {got}")]
    HorizonMismatch { expected: usize, got: usize },
    #[error("invalid lidar configuration: {0}")]
    InvalidLidar(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no trajectory through critical point ({x:.3}, {y:.3}) at t={t_crit} cleared the plan after {attempts} attempts")]
    SampleExhausted { x: f64, y: f64, t_crit: usize, attempts: usize },
    #[error("arena too small: {0}")]
    ArenaTooSmall(String),
    #[error("planner failure: {0}")]
    Planner(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code convention: 2 for bad input or configuration, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Geometry(_) | Error::Config(_) | Error::InvalidInput(_) | Error::Json(_) => 2,
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
