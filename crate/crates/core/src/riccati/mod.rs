//! The six coupled Riccati equations of the quadratic value ansatz, their
//! analytic Jacobians, and the backward solver with blow-up detection.
//!
//! The equations are written in time-to-go `s = T - t`: `da/ds = F(a)` with
//! `a(s = 0)` the terminal data. Under this convention the interior system is
//! bounded exactly when both stability margins are positive.

pub mod radau;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_num;
use crate::model::{ModelParams, ParamField};
pub use radau::RadauOptions;
use radau::{StiffSystem, Termination};

/// Coefficients of `V = a0 + a1 m + a2 v + a11 m² + a12 m v + a22 v²`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RiccatiCoeffs {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    pub a11: f64,
    pub a12: f64,
    pub a22: f64,
}

impl RiccatiCoeffs {
    pub const NAMES: [&'static str; 6] = ["a0", "a1", "a2", "a11", "a12", "a22"];

    pub const fn from_array(a: [f64; 6]) -> Self {
        Self {
            a0: a[0],
            a1: a[1],
            a2: a[2],
            a11: a[3],
            a12: a[4],
            a22: a[5],
        }
    }

    pub const fn to_array(self) -> [f64; 6] {
        [self.a0, self.a1, self.a2, self.a11, self.a12, self.a22]
    }

    /// Terminal data: `G_m m² + G_v v`.
    pub fn terminal(p: &ModelParams) -> Self {
        Self {
            a2: p.g_v,
            a11: p.g_m,
            ..Self::default()
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.to_array().iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// `(1 - w) self + w other`, component-wise.
    pub fn lerp(&self, other: &Self, w: f64) -> Self {
        let (a, b) = (self.to_array(), other.to_array());
        Self::from_array(std::array::from_fn(|i| a[i] + w * (b[i] - a[i])))
    }
}

/// Parameter combinations that appear in the right-hand side.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RiccatiSystem {
    beta: f64,
    w1: f64,
    w2_bar: f64,
    /// σ_L² + σ_c²
    sig2: f64,
    /// λ_m − η²/(4R_u)
    cm: f64,
    /// λ_v − χ²/(4R)
    cv: f64,
    /// ηκ/(2R_u)
    k1: f64,
    /// κ²/(4R_u)
    k2: f64,
}

impl RiccatiSystem {
    pub(crate) fn new(p: &ModelParams) -> Self {
        Self {
            beta: p.beta,
            w1: p.w1,
            w2_bar: p.w2_bar,
            sig2: p.sigma_sq(),
            cm: p.lambda_m - p.eta * p.eta / (4.0 * p.r_u),
            cv: p.lambda_v - p.chi * p.chi / (4.0 * p.r),
            k1: p.eta * p.kappa / (2.0 * p.r_u),
            k2: p.kappa * p.kappa / (4.0 * p.r_u),
        }
    }

    pub(crate) fn eval(&self, a: &[f64; 6]) -> [f64; 6] {
        let [_, a1, a2, a11, a12, a22] = *a;
        let Self {
            beta,
            w1,
            w2_bar,
            sig2,
            cm,
            cv,
            k1,
            k2,
        } = *self;
        [
            sig2 * a2 + cm * a1 * a1 + cv * a2 * a2,
            sig2 * a12 + 4.0 * cm * a1 * a11 + 2.0 * cv * a2 * a12,
            w2_bar - 2.0 * beta * a2 + 2.0 * sig2 * a22 + 2.0 * cm * a1 * a12
                + 4.0 * cv * a2 * a22
                - k1 * a1,
            w1 + 4.0 * cm * a11 * a11 + cv * a12 * a12,
            -2.0 * beta * a12 - 2.0 * k1 * a11 + 4.0 * cm * a11 * a12 + 4.0 * cv * a12 * a22,
            -4.0 * beta * a22 - k2 - k1 * a12 + cm * a12 * a12 + 4.0 * cv * a22 * a22,
        ]
    }

    pub(crate) fn jac(&self, a: &[f64; 6]) -> [[f64; 6]; 6] {
        let [_, a1, a2, a11, a12, a22] = *a;
        let Self {
            beta,
            sig2,
            cm,
            cv,
            k1,
            ..
        } = *self;
        [
            [0.0, 2.0 * cm * a1, sig2 + 2.0 * cv * a2, 0.0, 0.0, 0.0],
            [
                0.0,
                4.0 * cm * a11,
                2.0 * cv * a12,
                4.0 * cm * a1,
                sig2 + 2.0 * cv * a2,
                0.0,
            ],
            [
                0.0,
                2.0 * cm * a12 - k1,
                -2.0 * beta + 4.0 * cv * a22,
                0.0,
                2.0 * cm * a1,
                2.0 * sig2 + 4.0 * cv * a2,
            ],
            [0.0, 0.0, 0.0, 8.0 * cm * a11, 2.0 * cv * a12, 0.0],
            [
                0.0,
                0.0,
                0.0,
                -2.0 * k1 + 4.0 * cm * a12,
                -2.0 * beta + 4.0 * cm * a11 + 4.0 * cv * a22,
                4.0 * cv * a12,
            ],
            [
                0.0,
                0.0,
                0.0,
                0.0,
                -k1 + 2.0 * cm * a12,
                -4.0 * beta + 8.0 * cv * a22,
            ],
        ]
    }
}

impl StiffSystem<6> for RiccatiSystem {
    fn rhs(&self, y: &[f64; 6]) -> [f64; 6] {
        self.eval(y)
    }

    fn jacobian(&self, y: &[f64; 6]) -> [[f64; 6]; 6] {
        self.jac(y)
    }
}

/// Time-to-go derivative `da/ds` of the six coefficients.
pub fn riccati_rhs(a: &RiccatiCoeffs, p: &ModelParams) -> RiccatiCoeffs {
    RiccatiCoeffs::from_array(RiccatiSystem::new(p).eval(&a.to_array()))
}

/// `∂F_i/∂a_j` in the order a0, a1, a2, a11, a12, a22.
pub fn rhs_jacobian(a: &RiccatiCoeffs, p: &ModelParams) -> [[f64; 6]; 6] {
    RiccatiSystem::new(p).jac(&a.to_array())
}

/// Partial derivative of the right-hand side with respect to one parameter.
///
/// Parameters that enter only through the terminal data (`G_m`, `G_v`) or not
/// at all (bounds, grid, initial state) give zero.
pub fn rhs_param_partial(a: &RiccatiCoeffs, p: &ModelParams, field: ParamField) -> RiccatiCoeffs {
    let [_, a1, a2, a11, a12, a22] = a.to_array();
    let d_sig2 = [a2, a12, 2.0 * a22, 0.0, 0.0, 0.0];
    let d_cm = [
        a1 * a1,
        4.0 * a1 * a11,
        2.0 * a1 * a12,
        4.0 * a11 * a11,
        4.0 * a11 * a12,
        a12 * a12,
    ];
    let d_cv = [
        a2 * a2,
        2.0 * a2 * a12,
        4.0 * a2 * a22,
        a12 * a12,
        4.0 * a12 * a22,
        4.0 * a22 * a22,
    ];
    let d_k1 = [0.0, 0.0, -a1, 0.0, -2.0 * a11, -a12];
    let d_k2 = [0.0, 0.0, 0.0, 0.0, 0.0, -1.0];

    // Chain-rule weights (∂σ², ∂cm, ∂cv, ∂k1, ∂k2) / ∂field.
    let (eta, chi, kappa, ru, r) = (p.eta, p.chi, p.kappa, p.r_u, p.r);
    let mut out = [0.0; 6];
    let mut acc = |w: f64, d: &[f64; 6]| {
        for i in 0..6 {
            out[i] += w * d[i];
        }
    };
    match field {
        ParamField::Beta => acc(1.0, &[0.0, 0.0, -2.0 * a2, 0.0, -2.0 * a12, -4.0 * a22]),
        ParamField::W1 => acc(1.0, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
        ParamField::W2Bar => acc(1.0, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]),
        ParamField::SigmaL => acc(2.0 * p.sigma_l, &d_sig2),
        ParamField::SigmaC => acc(2.0 * p.sigma_c, &d_sig2),
        ParamField::LambdaM => acc(1.0, &d_cm),
        ParamField::LambdaV => acc(1.0, &d_cv),
        ParamField::Eta => {
            acc(-eta / (2.0 * ru), &d_cm);
            acc(kappa / (2.0 * ru), &d_k1);
        }
        ParamField::Chi => acc(-chi / (2.0 * r), &d_cv),
        ParamField::R => acc(chi * chi / (4.0 * r * r), &d_cv),
        ParamField::Kappa => {
            acc(eta / (2.0 * ru), &d_k1);
            acc(kappa / (2.0 * ru), &d_k2);
        }
        ParamField::RU => {
            acc(eta * eta / (4.0 * ru * ru), &d_cm);
            acc(-eta * kappa / (2.0 * ru * ru), &d_k1);
            acc(-kappa * kappa / (4.0 * ru * ru), &d_k2);
        }
        _ => {}
    }
    RiccatiCoeffs::from_array(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum RiccatiStatus {
    Bounded,
    /// `t_star` is the calendar time at which the guard tripped.
    BlowUp { t_star: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub horizon: f64,
    /// Increasing node times. For a blown-up solve only the nodes after the
    /// explosion (closer to `T`) are present.
    pub times: Vec<f64>,
    pub coeffs: Vec<RiccatiCoeffs>,
    pub status: RiccatiStatus,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl RiccatiSolution {
    pub fn is_bounded(&self) -> bool {
        self.status == RiccatiStatus::Bounded
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().fold(0.0_f64, |m, c| m.max(c.max_abs()))
    }

    /// Coefficients at `t`, linearly interpolated between bracketing nodes.
    pub fn coeffs_at(&self, t: f64) -> Result<RiccatiCoeffs> {
        if let RiccatiStatus::BlowUp { t_star } = self.status {
            return Err(Error::BlowUpSolution { t_star });
        }
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::TimeOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        let n = self.times.len();
        let k = self.times.partition_point(|&tk| tk <= t);
        if k == 0 {
            return Ok(self.coeffs[0]);
        }
        if k >= n {
            return Ok(self.coeffs[n - 1]);
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        if t == t0 {
            return Ok(self.coeffs[k - 1]);
        }
        let w = (t - t0) / (t1 - t0);
        Ok(self.coeffs[k - 1].lerp(&self.coeffs[k], w))
    }

    /// Coefficient trajectories as CSV: `t,a0,a1,a2,a11,a12,a22,status`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,a0,a1,a2,a11,a12,a22,status")?;
        let status = match self.status {
            RiccatiStatus::Bounded => "bounded",
            RiccatiStatus::BlowUp { .. } => "blowup",
        };
        for (t, c) in self.times.iter().zip(&self.coeffs) {
            write!(w, "{}", fmt_num(*t))?;
            for v in c.to_array() {
                write!(w, ",{}", fmt_num(v))?;
            }
            writeln!(w, ",{status}")?;
        }
        Ok(())
    }
}

/// Default integrator settings for the backward solve.
pub fn default_options() -> RadauOptions {
    RadauOptions::default()
}

/// Below this magnitude a Newton failure is reported as a solver fault
/// rather than as an explosion of the solution.
const HEALTHY_MAGNITUDE: f64 = 1e4;

/// Uniform node times `t_k = k T/(n-1)` with both endpoints exact.
pub fn uniform_nodes(horizon: f64, n_nodes: usize) -> Vec<f64> {
    let last = n_nodes - 1;
    (0..n_nodes)
        .map(|k| {
            if k == last {
                horizon
            } else {
                horizon * k as f64 / last as f64
            }
        })
        .collect()
}

pub fn solve_backward(p: &ModelParams, n_nodes: usize) -> Result<RiccatiSolution> {
    solve_backward_with(p, n_nodes, &default_options())
}

/// Integrate from `t = T` down to `t = 0` and sample on `n_nodes` uniform nodes.
pub fn solve_backward_with(
    p: &ModelParams,
    n_nodes: usize,
    opts: &RadauOptions,
) -> Result<RiccatiSolution> {
    if n_nodes < 2 {
        return Err(Error::InvalidArgument(format!(
            "n_nodes must be at least 2, got {n_nodes}"
        )));
    }
    let p = p.validated()?;
    let horizon = p.horizon;
    let times = uniform_nodes(horizon, n_nodes);
    // Time-to-go of each node, increasing; the first is exactly zero.
    let outputs: Vec<f64> = times.iter().rev().map(|t| horizon - t).collect();
    let y0 = RiccatiCoeffs::terminal(&p).to_array();
    let out = radau::integrate(&RiccatiSystem::new(&p), y0, horizon, &outputs, opts);

    let status = match out.termination {
        Termination::Completed => RiccatiStatus::Bounded,
        Termination::Guard { s } => RiccatiStatus::BlowUp { t_star: horizon - s },
        Termination::Underflow {
            s,
            newton_failure,
            max_abs,
            rejections,
        } => {
            if newton_failure && max_abs <= HEALTHY_MAGNITUDE {
                return Err(Error::StageSolver {
                    t: horizon - s,
                    step: opts.h_min,
                    max_abs,
                    rejections,
                });
            }
            RiccatiStatus::BlowUp { t_star: horizon - s }
        }
        Termination::StepBudget { .. } => return Err(Error::StepBudget(opts.max_steps)),
    };

    let reached = out.values.len();
    let mut coeffs: Vec<RiccatiCoeffs> = out
        .values
        .into_iter()
        .rev()
        .map(RiccatiCoeffs::from_array)
        .collect();
    let times = times[n_nodes - reached..].to_vec();
    if let Some(last) = coeffs.last_mut() {
        // Terminal data reported without any integration error.
        *last = RiccatiCoeffs::terminal(&p);
    }
    Ok(RiccatiSolution {
        horizon,
        times,
        coeffs,
        status,
        accepted_steps: out.stats.accepted,
        rejected_steps: out.stats.rejected,
    })
}

/// Solve on the grid aligned with the forward Euler grid.
pub fn solve_aligned(p: &ModelParams) -> Result<RiccatiSolution> {
    solve_backward(p, p.aligned_nodes())
}

/// Backward distance at which the scalar comparison `y' = w1 + C y²`,
/// `y(0) = G_m`, explodes; `None` when it stays bounded.
pub fn scalar_comparison_horizon(p: &ModelParams) -> Option<f64> {
    let c = 4.0 * p.lambda_m - p.eta * p.eta / p.r_u;
    if c <= 0.0 {
        return None;
    }
    if p.w1 > 0.0 {
        let root = (p.w1 * c).sqrt();
        Some((std::f64::consts::FRAC_PI_2 - (p.g_m * (c / p.w1).sqrt()).atan()) / root)
    } else if p.g_m > 0.0 {
        Some(1.0 / (c * p.g_m))
    } else {
        None
    }
}
