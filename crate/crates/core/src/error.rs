use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("register dimension {dim} exceeds the exact-dynamics capacity of {cap}")]
    Capacity { dim: usize, cap: usize },

    #[error("lattice region holds about {estimate} candidate sites, more than the limit of {limit}")]
    LatticeCapacity { estimate: usize, limit: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("sites {0} and {1} coincide")]
    CoincidentSites(usize, usize),

    #[error("basis mismatch: state has dimension {state}, operator has dimension {operator}")]
    BasisMismatch { state: usize, operator: usize },

    #[error("undefined transition ({0}, {1})")]
    UndefinedTransition(usize, usize),

    #[error("spin {0} is not part of the register")]
    UnknownSpin(String),

    #[error("selective pulse bandwidth {bandwidth_mhz:.3} MHz is not below half the hyperfine coupling {hyperfine_mhz:.3} MHz")]
    Selectivity { bandwidth_mhz: f64, hyperfine_mhz: f64 },

    #[error("schedule invalid: {0}")]
    Schedule(String),

    #[error("fit failed: {reason} (residual rms {residual_rms:.3e})")]
    Fit { reason: String, residual_rms: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
