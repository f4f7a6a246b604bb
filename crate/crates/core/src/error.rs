use thiserror::Error;

/// Errors raised across the funnel pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },

    #[error("input contains non-finite entries")]
    NonFiniteInput,

    #[error("matrix is not symmetric (relative asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive definite (pivot {pivot} = {value:.3e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is singular (zero pivot at {pivot})")]
    Singular { pivot: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("integration exceeded {max_steps} steps at t = {t}")]
    StepLimitExceeded { max_steps: usize, t: f64 },

    #[error("state became non-finite at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("evaluation of a vector field returned a non-finite value at t = {t}")]
    NonFiniteEvaluation { t: f64 },

    #[error("time {t} outside of domain [{start}, {end}]")]
    OutOfDomain { t: f64, start: f64, end: f64 },

    #[error("no stabilizing initial gain found")]
    NoStabilizingGain,

    #[error("{what} did not converge after {iterations} iterations")]
    NotConverged { what: &'static str, iterations: usize },

    #[error("problem callbacks returned a non-finite value at the start point")]
    NonFiniteProblem,

    #[error("start point violates the constraint by {violation:.3e}")]
    InfeasibleStart { violation: f64 },

    #[error("trajectory end lies outside the goal interior (goal value {value:.6e} >= level {level:.6e})")]
    GoalExcludesTrajectoryEnd { value: f64, level: f64 },

    #[error("level rho_{k} underflowed to {rho:.3e}")]
    RhoUnderflow { k: usize, rho: f64 },

    #[error("{nlp} failed at interval {k}: {source}")]
    Synthesis {
        k: usize,
        nlp: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
