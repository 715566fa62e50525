use thiserror::Error;

use crate::model::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters:\n{0}")]
    InvalidParams(ValidationReport),

    #[error("riccati solution blew up at t* = {t_star}; coefficients are unavailable")]
    BlowUpSolution { t_star: f64 },

    #[error("time {t} lies outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    /// Newton iteration on the Radau stage equations failed while the state
    /// was still of moderate size, so this is not a finite-time explosion.
    #[error(
        "implicit stage solver failed to converge at t = {t} (step {step:e}, max |a| = {max_abs:e}, {rejections} consecutive rejections)"
    )]
    StageSolver {
        t: f64,
        step: f64,
        max_abs: f64,
        rejections: usize,
    },

    #[error("integrator exceeded the step budget of {0} steps")]
    StepBudget(usize),

    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{what}[{index}] = {value} lies outside [{lo}, {hi}]")]
    ControlOutOfBounds {
        what: &'static str,
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("worker pool: {0}")]
    Pool(String),
}
