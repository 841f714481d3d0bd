use thiserror::Error;

/// Errors raised anywhere in the simulation and analysis stack.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("step size underflow at t = {t} (h = {h})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("non-finite state at t = {t} (component {index})")]
    NonFinite { t: f64, index: usize },

    #[error("component {index} fell to {value} at t = {t}, below the negativity floor {floor}")]
    Negative {
        t: f64,
        index: usize,
        value: f64,
        floor: f64,
    },

    #[error("step budget of {0} steps exhausted")]
    TooManySteps(usize),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("no fixed point: {0}")]
    NoFixedPoint(String),

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("bisection bracket is not monotone: {0}")]
    NonMonotone(String),

    #[error("infeasible target {target}: achievable range is [{min}, {max}]")]
    Infeasible { target: f64, min: f64, max: f64 },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// True for failures that originate in the time integrator.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::StepUnderflow { .. }
                | Error::NonFinite { .. }
                | Error::Negative { .. }
                | Error::TooManySteps(_)
                | Error::NoConvergence(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
