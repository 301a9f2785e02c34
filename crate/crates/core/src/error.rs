use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("density {value} veh/km outside [0, {max}]")]
    DensityOutOfDomain { value: f64, max: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("CFL condition violated: time step {dt_s} s exceeds segment traversal time {limit_s} s")]
    Cfl { dt_s: f64, limit_s: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("perturbation of coordinate {index} leaves the admissible domain")]
    PerturbationDomain { index: usize },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("singular input-change weighting; use a strictly positive R' weight")]
    SingularRatePenalty,

    #[error("controller failed at step {step}: {source}")]
    Controller {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
