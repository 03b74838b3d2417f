use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("assumption violated: {0}")]
    Assumption(#[from] AssumptionViolation),

    #[error("strategy is not admissible: rate {rate} at state {state} outside [0, {alpha}]")]
    Admissibility { rate: f64, state: f64, alpha: f64 },

    #[error("no sign change of rho - beta found after {expansions} bracket expansions")]
    BracketNotFound { expansions: u32 },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("accuracy target missed in {what}: estimated error {achieved:e} > target {target:e}")]
    Accuracy {
        what: &'static str,
        achieved: f64,
        target: f64,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// A named failure of one of the standing model assumptions.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssumptionViolation {
    #[error("exponential moment diverges at theta_bar = {theta_bar}: jump term {term} has decay {decay}")]
    ExponentialMoment {
        theta_bar: f64,
        term: usize,
        decay: f64,
    },
    #[error("f' decreases between grid points {x0} and {x1} ({d0} > {d1})")]
    Convexity { x0: f64, x1: f64, d0: f64, d1: f64 },
    #[error("|f({x})| = {value} exceeds growth bound {bound}")]
    Growth { x: f64, value: f64, bound: f64 },
    #[error("f({x1}) - f({x0}) = {diff} but integral of f' is {integral}")]
    Derivative {
        x0: f64,
        x1: f64,
        diff: f64,
        integral: f64,
    },
    #[error("sampling grid is empty or unsorted")]
    BadGrid,
}
