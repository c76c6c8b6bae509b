use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("autocorrelation does not exist: {0}")]
    AcfNonexistent(String),
    #[error("oscillating kernel tail: leading eigenvalue {0} is complex")]
    UnsupportedTail(String),
    #[error("simulation integrity: {0}")]
    SimulationIntegrity(String),
    #[error("runaway intensity {intensity} at t = {time} (stationary rate {stationary})")]
    Runaway { time: f64, intensity: f64, stationary: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate sample variance")]
    DegenerateVariance,
    #[error("invalid estimate: {0}")]
    InvalidEstimate(String),
}

impl Error {
    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::InvalidModel(_) => "invalid_model",
            Error::Numerical(_) => "numerical",
            Error::AcfNonexistent(_) => "acf_nonexistent",
            Error::UnsupportedTail(_) => "unsupported_tail",
            Error::SimulationIntegrity(_) => "simulation_integrity",
            Error::Runaway { .. } => "runaway",
            Error::InsufficientData(_) => "insufficient_data",
            Error::DegenerateVariance => "degenerate_variance",
            Error::InvalidEstimate(_) => "invalid_estimate",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
