//! Robust linear-quadratic mean-field control of interbank liquidity.
//!
//! The crate solves the backward Riccati system of the quadratic value
//! function, simulates the closed-loop moment dynamics under projected
//! feedback and worst-case distortions, runs the parameter sweeps, the
//! N-bank particle system and the parameter-sensitivity analysis.

pub mod error;
pub mod experiments;
pub mod forward;
pub mod io;
pub mod model;
pub mod particle;
pub mod policy;
pub mod riccati;
pub mod sensitivity;

pub use error::{Error, Result};
pub use model::{
    stability_report, validate, ModelParams, ParamField, StabilityReport, ValidationReport,
    Violation,
};
pub use riccati::{
    riccati_rhs, scalar_comparison_horizon, solve_aligned, solve_backward, RiccatiCoeffs, RiccatiSolution,
    RiccatiStatus,
};
pub use forward::{simulate, simulate_open_loop, Metrics, Trajectory};
pub use policy::{feedback, gradient, value, worst_case, ControlPair, DistortionPair, ValueGradient};
pub use experiments::{CellOutcome, CellStatus, Executor, SweepResult};
pub use particle::{poc_experiment, simulate_nbank, ParticleEnsemble};
pub use sensitivity::{solve_sensitivity, value_sensitivity, SensitivityDirection, SensitivityPath};
