use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("singular matrix: pivot {pivot:e} below threshold {threshold:e} in column {column}")]
    SingularMatrix { column: usize, pivot: f64, threshold: f64 },
    #[error("ill-conditioned matrix: condition estimate {estimate:e} exceeds bound {bound:e}")]
    IllConditioned { estimate: f64, bound: f64 },
    #[error("singular Hessian: {0}")]
    SingularHessian(String),
    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("function `{name}` expects {expected} argument(s), got {found}")]
    Arity {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("tangent vectors live over different base points")]
    BasePointMismatch,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("every sample point was inadmissible ({skipped} skipped)")]
    AllSamplesInadmissible { skipped: usize },
    #[error("curvature value depends on the chosen extension (difference {difference:e})")]
    NotWellDefined { difference: f64 },
    #[error("splitting is not affine (reconstruction residual {residual:e})")]
    NotAffine { residual: f64 },
    #[error("implicit splitting has several branches: roots differ by {spread:e} at {point:?}")]
    BranchAmbiguity { point: Vec<f64>, spread: f64 },
    #[error("subduced function depends on fibre coordinates (residual {residual:e})")]
    NotSubducible { residual: f64 },
    #[error("hypothesis failed: {0}")]
    HypothesisFailed(String),
    #[error("splitting is not principal (residual {residual:e})")]
    NotPrincipal { residual: f64 },
    #[error("group flow left the chart at t = {t}")]
    FlowEscape { t: f64 },
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// True for failures of the numerical machinery itself (solves and integrations).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularMatrix { .. }
                | Error::IllConditioned { .. }
                | Error::SingularHessian(_)
                | Error::NoConvergence { .. }
                | Error::NonFiniteState { .. }
                | Error::Domain(_)
                | Error::AllSamplesInadmissible { .. }
                | Error::FlowEscape { .. }
                | Error::BranchAmbiguity { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
