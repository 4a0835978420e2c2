use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures raised by the numerical kernels and model constructors.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite entry in {0}")]
    NonFinite(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{0} did not converge")]
    NoConvergence(&'static str),

    #[error("singular equation: {0}")]
    SingularEquation(String),

    #[error("matrix is singular or ill-conditioned (condition estimate {cond:.3e})")]
    SingularMatrix { cond: f64 },

    #[error("evaluation point lies {distance:.3e} from a pole")]
    PoleProximity { distance: f64 },

    #[error("ARE certification failed: {0}")]
    Certification(String),
}

impl Error {
    /// True for failures of the numerics rather than of the input or of a
    /// mathematical property.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence(_)
                | Error::SingularEquation(_)
                | Error::SingularMatrix { .. }
                | Error::PoleProximity { .. }
        )
    }
}
