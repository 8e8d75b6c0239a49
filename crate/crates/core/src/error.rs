use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A parameter is outside the range where the formula is defined.
    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    /// The subsampled-Gaussian cost is only valid for q < 1/(16σ) and σ ≥ 1.
    #[error("outside the subsampled Gaussian validity region (q = {q}, sigma = {sigma})")]
    OutsideValidityRegion { q: f64, sigma: f64 },

    #[error("{method} noise bound is non-positive ({value}); the closed form is vacuous here")]
    NonPositiveBound { method: &'static str, value: f64 },

    #[error("infeasible budget: delta = {delta} must exceed delta_tilde = {delta_tilde}")]
    InfeasibleBudget { delta: f64, delta_tilde: f64 },

    #[error("root solver failed: {0}")]
    SolverFailure(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("realized gradient norm {realized} exceeds the configured bound G = {bound}")]
    GradBoundExceeded { realized: f64, bound: f64 },
}

impl Error {
    /// Short machine-readable tag used in CSV rows and error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::OutsideValidityRegion { .. } => "outside_validity_region",
            Error::NonPositiveBound { .. } => "non_positive_bound",
            Error::InfeasibleBudget { .. } => "infeasible_budget",
            Error::SolverFailure(_) => "solver_failure",
            Error::Empty(_) => "empty_input",
            Error::InvalidConfig { .. } => "invalid_config",
            Error::GradBoundExceeded { .. } => "grad_bound_exceeded",
        }
    }
}
