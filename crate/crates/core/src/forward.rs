//! Closed-loop moment dynamics by explicit Euler, cost accumulation and
//! trajectory metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_num;
use crate::model::ModelParams;
use crate::policy::{feedback, gradient, kl_penalty, worst_case};
use crate::riccati::{RiccatiCoeffs, RiccatiSolution, RiccatiStatus};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "J_pen")]
    pub j_pen: f64,
    #[serde(rename = "m_T")]
    pub m_t: f64,
    #[serde(rename = "v_T")]
    pub v_t: f64,
    pub u_bar: f64,
    pub pi_bar: f64,
    pub theta_peak: f64,
    pub xi_peak: f64,
    #[serde(rename = "S_u")]
    pub s_u: f64,
    #[serde(rename = "S_pi")]
    pub s_pi: f64,
}

impl Metrics {
    pub const FIELDS: [&'static str; 10] = [
        "J", "J_pen", "m_T", "v_T", "u_bar", "pi_bar", "theta_peak", "xi_peak", "S_u", "S_pi",
    ];

    pub fn values(&self) -> [f64; 10] {
        [
            self.j,
            self.j_pen,
            self.m_t,
            self.v_t,
            self.u_bar,
            self.pi_bar,
            self.theta_peak,
            self.xi_peak,
            self.s_u,
            self.s_pi,
        ]
    }
}

/// Realized paths on the forward grid; every array has `n_steps + 1` entries.
///
/// Controls and distortions at the final node are reported for completeness
/// but are not applied; averages, peaks and saturation fractions cover the
/// `n_steps` applied values only.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub u: Vec<f64>,
    pub pi: Vec<f64>,
    pub theta: Vec<f64>,
    pub xi: Vec<f64>,
    pub u_saturated: Vec<bool>,
    pub pi_saturated: Vec<bool>,
    pub metrics: Metrics,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    /// `t,m,v,u,pi,theta,xi`
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,m,v,u,pi,theta,xi")?;
        for n in 0..self.len() {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                fmt_num(self.times[n]),
                fmt_num(self.m[n]),
                fmt_num(self.v[n]),
                fmt_num(self.u[n]),
                fmt_num(self.pi[n]),
                fmt_num(self.theta[n]),
                fmt_num(self.xi[n]),
            )?;
        }
        Ok(())
    }
}

/// Inputs applied over one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepInputs {
    pub u: f64,
    pub pi: f64,
    pub theta: f64,
    pub xi: f64,
    pub u_saturated: bool,
    pub pi_saturated: bool,
}

/// Explicit Euler propagation with inputs chosen by `policy(n, m_n, v_n)`.
/// Dynamics and cost weights come from `p`; `floor` enables the `max(0, .)`
/// variance floor.
pub fn integrate_moments<F>(p: &ModelParams, floor: bool, mut policy: F) -> Trajectory
where
    F: FnMut(usize, f64, f64) -> StepInputs,
{
    let n_steps = p.n_steps();
    let dt = p.step();
    let sig2 = p.sigma_sq();
    let len = n_steps + 1;
    let mut tr = Trajectory {
        times: (0..len)
            .map(|n| if n == n_steps { p.horizon } else { n as f64 * dt })
            .collect(),
        m: Vec::with_capacity(len),
        v: Vec::with_capacity(len),
        u: Vec::with_capacity(len),
        pi: Vec::with_capacity(len),
        theta: Vec::with_capacity(len),
        xi: Vec::with_capacity(len),
        u_saturated: Vec::with_capacity(len),
        pi_saturated: Vec::with_capacity(len),
        metrics: Metrics::default(),
    };
    let (mut m, mut v) = (p.m0, p.v0);
    for n in 0..len {
        let s = policy(n, m, v);
        tr.m.push(m);
        tr.v.push(v);
        tr.u.push(s.u);
        tr.pi.push(s.pi);
        tr.theta.push(s.theta);
        tr.xi.push(s.xi);
        tr.u_saturated.push(s.u_saturated);
        tr.pi_saturated.push(s.pi_saturated);
        if n < n_steps {
            m += (p.eta * s.u + s.theta) * dt;
            let next = v + (-2.0 * p.beta * v + sig2 + s.xi - p.chi * s.pi) * dt;
            v = if floor { next.max(0.0) } else { next };
        }
    }
    tr.metrics = metrics(&tr, p);
    tr
}

fn metrics(tr: &Trajectory, p: &ModelParams) -> Metrics {
    let n = tr.n_steps();
    let nf = n as f64;
    let (j, j_pen) = cost(tr, p);
    let mean = |x: &[f64]| x[..n].iter().sum::<f64>() / nf;
    let peak = |x: &[f64]| x[..n].iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    let frac = |x: &[bool]| x[..n].iter().filter(|&&b| b).count() as f64 / nf;
    Metrics {
        j,
        j_pen,
        m_t: tr.m[n],
        v_t: tr.v[n],
        u_bar: mean(&tr.u),
        pi_bar: mean(&tr.pi),
        theta_peak: peak(&tr.theta),
        xi_peak: peak(&tr.xi),
        s_u: frac(&tr.u_saturated),
        s_pi: frac(&tr.pi_saturated),
    }
}

/// Left-endpoint rectangle quadrature of the running cost plus the terminal
/// cost; returns `(J, J_pen)` where `J_pen` subtracts the entropy penalties.
pub fn cost(tr: &Trajectory, p: &ModelParams) -> (f64, f64) {
    let n = tr.n_steps();
    let mut running = 0.0;
    let mut penalty = 0.0;
    for k in 0..n {
        let dt = tr.times[k + 1] - tr.times[k];
        let (m, v, u, pi) = (tr.m[k], tr.v[k], tr.u[k], tr.pi[k]);
        running += (p.w1 * m * m
            + (p.w2_bar + p.kappa * u) * v
            + p.r * pi * pi
            + p.r_u * u * u)
            * dt;
        penalty += (kl_penalty(tr.theta[k], p.lambda_m) + kl_penalty(tr.xi[k], p.lambda_v)) * dt;
    }
    let terminal = p.g_m * tr.m[n] * tr.m[n] + p.g_v * tr.v[n];
    let j = running + terminal;
    (j, j - penalty)
}

/// Coefficient lookup on the forward grid: direct indexing when the Riccati
/// grid is aligned, linear interpolation otherwise.
pub(crate) struct CoeffLookup<'a> {
    sol: &'a RiccatiSolution,
    aligned: bool,
}

impl<'a> CoeffLookup<'a> {
    pub(crate) fn new(sol: &'a RiccatiSolution, p: &ModelParams) -> Result<Self> {
        if let RiccatiStatus::BlowUp { t_star } = sol.status {
            return Err(Error::BlowUpSolution { t_star });
        }
        if (sol.horizon - p.horizon).abs() > 1e-12 * p.horizon {
            return Err(Error::InvalidArgument(format!(
                "riccati horizon {} differs from T = {}",
                sol.horizon, p.horizon
            )));
        }
        Ok(Self {
            sol,
            aligned: sol.times.len() == p.n_steps() + 1,
        })
    }

    pub(crate) fn at(&self, n: usize, t: f64) -> RiccatiCoeffs {
        if self.aligned {
            self.sol.coeffs[n]
        } else {
            self.sol
                .coeffs_at(t.clamp(0.0, self.sol.horizon))
                .expect("bounded solution queried inside its horizon")
        }
    }
}

/// Closed loop where the controller and the adversary may use different
/// value functions.
///
/// `p` supplies the dynamics and cost weights; the controller's feedback uses
/// its own parameters and Riccati solution, as does the adversary's.
pub fn simulate_mixed(
    p: &ModelParams,
    controller: (&ModelParams, &RiccatiSolution),
    adversary: (&ModelParams, &RiccatiSolution),
    floor: bool,
) -> Result<Trajectory> {
    let (pc, sc) = controller;
    let (pa, sa) = adversary;
    let lc = CoeffLookup::new(sc, p)?;
    let la = CoeffLookup::new(sa, p)?;
    let dt = p.step();
    let last = p.n_steps();
    Ok(integrate_moments(p, floor, |n, m, v| {
        let t = if n == last { p.horizon } else { n as f64 * dt };
        let c = feedback(&gradient(&lc.at(n, t), m, v), v, pc);
        let d = worst_case(&gradient(&la.at(n, t), m, v), pa);
        StepInputs {
            u: c.u,
            pi: c.pi,
            theta: d.theta,
            xi: d.xi,
            u_saturated: c.u_saturated,
            pi_saturated: c.pi_saturated,
        }
    }))
}

/// Closed-loop simulation under projected feedback and worst-case distortions.
pub fn simulate(p: &ModelParams, sol: &RiccatiSolution) -> Result<Trajectory> {
    simulate_mixed(p, (p, sol), (p, sol), true)
}

fn check_path(what: &'static str, path: &[f64], n_steps: usize) -> Result<()> {
    if path.len() != n_steps && path.len() != n_steps + 1 {
        return Err(Error::LengthMismatch {
            what,
            expected: n_steps + 1,
            got: path.len(),
        });
    }
    Ok(())
}

/// Euler propagation of prescribed inputs.
///
/// Paths may have `n_steps` entries (one per step) or `n_steps + 1` (one per
/// node); in the former case the last value is repeated at the final node.
pub fn simulate_open_loop(
    p: &ModelParams,
    u_path: &[f64],
    pi_path: &[f64],
    theta_path: &[f64],
    xi_path: &[f64],
) -> Result<Trajectory> {
    let n_steps = p.n_steps();
    check_path("u_path", u_path, n_steps)?;
    check_path("pi_path", pi_path, n_steps)?;
    check_path("theta_path", theta_path, n_steps)?;
    check_path("xi_path", xi_path, n_steps)?;
    for (index, &u) in u_path.iter().enumerate() {
        if !(p.u_min..=p.u_max).contains(&u) {
            return Err(Error::ControlOutOfBounds {
                what: "u",
                index,
                value: u,
                lo: p.u_min,
                hi: p.u_max,
            });
        }
    }
    for (index, &pi) in pi_path.iter().enumerate() {
        if !(0.0..=p.pi_max).contains(&pi) {
            return Err(Error::ControlOutOfBounds {
                what: "pi",
                index,
                value: pi,
                lo: 0.0,
                hi: p.pi_max,
            });
        }
    }
    let at = |x: &[f64], n: usize| x[n.min(x.len() - 1)];
    Ok(integrate_moments(p, true, |n, _, _| StepInputs {
        u: at(u_path, n),
        pi: at(pi_path, n),
        theta: at(theta_path, n),
        xi: at(xi_path, n),
        u_saturated: false,
        pi_saturated: false,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamField;
    use crate::riccati::solve_aligned;
    use proptest::prelude::*;

    fn closed_loop(p: &ModelParams) -> Trajectory {
        simulate(p, &solve_aligned(p).unwrap()).unwrap()
    }

    #[test]
    fn baseline_initial_controls_and_over_monitoring() {
        let p = ModelParams::baseline();
        let tr = closed_loop(&p);
        assert!((-0.45..=-0.15).contains(&tr.u[0]), "u0 = {}", tr.u[0]);
        assert!((0.7..=1.3).contains(&tr.pi[0]), "pi0 = {}", tr.pi[0]);
        assert!(tr.v.iter().zip(&tr.pi).any(|(&v, &pi)| v == 0.0 && pi > 0.05));
        assert!(tr.metrics.j_pen <= tr.metrics.j);
        assert!(tr.metrics.j >= 0.0);
    }

    #[test]
    fn strong_adversary_balances_variance_drift() {
        let p = ModelParams {
            lambda_m: 0.15,
            lambda_v: 0.15,
            ..ModelParams::baseline()
        };
        let tr = closed_loop(&p);
        let n = tr.n_steps();
        let drift = -2.0 * p.beta * tr.v[n] + p.sigma_sq() + tr.xi[n] - p.chi * tr.pi[n];
        assert!(tr.metrics.v_t > 0.01);
        assert!(drift.abs() < 0.05, "drift = {drift}");
    }

    #[test]
    fn blown_up_solution_is_rejected() {
        let p = ModelParams::baseline().with(ParamField::LambdaM, 0.5);
        let sol = solve_aligned(&p).unwrap();
        assert!(matches!(
            simulate(&p, &sol),
            Err(Error::BlowUpSolution { .. })
        ));
    }

    fn zeros(p: &ModelParams) -> Vec<f64> {
        vec![0.0; p.n_steps()]
    }

    #[test]
    fn open_loop_variance_reaches_its_fixed_point() {
        let p = ModelParams {
            horizon: 50.0,
            ..ModelParams::baseline()
        };
        let z = zeros(&p);
        let tr = simulate_open_loop(&p, &z, &z, &z, &z).unwrap();
        assert!((tr.metrics.v_t - 0.5).abs() <= 1e-3);
        assert!(tr.m.iter().all(|&m| m == p.m0));
    }

    #[test]
    fn constant_distortion_integrates_linearly() {
        let p = ModelParams::baseline();
        let z = zeros(&p);
        let c = vec![0.03; p.n_steps()];
        let tr = simulate_open_loop(&p, &z, &z, &c, &z).unwrap();
        assert!((tr.metrics.m_t - (p.m0 + 0.03 * p.horizon)).abs() < 1e-9);
    }

    #[test]
    fn open_loop_rejects_bad_inputs() {
        let p = ModelParams::baseline();
        let z = zeros(&p);
        let mut bad = z.clone();
        bad[3] = 1.5;
        assert!(matches!(
            simulate_open_loop(&p, &bad, &z, &z, &z),
            Err(Error::ControlOutOfBounds { what: "u", index: 3, .. })
        ));
        assert!(matches!(
            simulate_open_loop(&p, &z, &z[..10], &z, &z),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn zero_paths_cost_nothing() {
        let p = ModelParams {
            m0: 0.0,
            v0: 0.0,
            sigma_l: 0.0,
            sigma_c: 0.0,
            ..ModelParams::baseline()
        };
        let z = zeros(&p);
        let tr = simulate_open_loop(&p, &z, &z, &z, &z).unwrap();
        assert_eq!(cost(&tr, &p), (0.0, 0.0));
    }

    #[test]
    fn single_step_running_cost() {
        let p = ModelParams {
            g_m: 0.5,
            g_v: 0.5,
            ..ModelParams::baseline()
        };
        let tr = Trajectory {
            times: vec![0.0, 1.0],
            m: vec![1.0, 0.0],
            v: vec![1.0, 0.0],
            u: vec![0.5, 0.0],
            pi: vec![0.2, 0.0],
            theta: vec![0.0, 0.0],
            xi: vec![0.0, 0.0],
            u_saturated: vec![false; 2],
            pi_saturated: vec![false; 2],
            metrics: Metrics::default(),
        };
        let (j, j_pen) = cost(&tr, &p);
        assert!((j - 0.76).abs() < 1e-12);
        assert_eq!(j, j_pen);
    }

    #[test]
    fn halving_dt_changes_cost_by_under_one_percent() {
        let p = ModelParams::baseline();
        let fine = ModelParams { dt: p.dt / 2.0, ..p };
        let (a, b) = (closed_loop(&p).metrics.j, closed_loop(&fine).metrics.j);
        assert!(((a - b) / a).abs() < 0.01);
    }

    #[test]
    fn zero_adversary_has_no_distortion() {
        let p = ModelParams {
            lambda_m: 0.0,
            lambda_v: 0.0,
            ..ModelParams::baseline()
        };
        let tr = closed_loop(&p);
        assert!(tr.theta.iter().chain(&tr.xi).all(|&x| x == 0.0));
        assert_eq!(tr.metrics.j, tr.metrics.j_pen);
    }

    #[test]
    fn simulation_is_deterministic() {
        let p = ModelParams::baseline();
        let sol = solve_aligned(&p).unwrap();
        let (a, b) = (simulate(&p, &sol).unwrap(), simulate(&p, &sol).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn coarser_riccati_grid_is_interpolated() {
        let p = ModelParams::baseline();
        let aligned = closed_loop(&p);
        let coarse = crate::riccati::solve_backward(&p, 2001).unwrap();
        let tr = simulate(&p, &coarse).unwrap();
        assert!((tr.metrics.j - aligned.metrics.j).abs() < 1e-3);
    }

    #[test]
    fn csv_has_declared_columns() {
        let p = ModelParams {
            horizon: 0.01,
            ..ModelParams::baseline()
        };
        let tr = closed_loop(&p);
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,m,v,u,pi,theta,xi\n"));
        assert_eq!(text.lines().count(), tr.len() + 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn closed_loop_invariants(
            lambda_m in 0.0..0.25f64,
            lambda_v in 0.0..0.2f64,
            chi in 0.3..1.5f64,
            beta in 0.05..0.5f64,
            v0 in 0.0..2.0f64,
        ) {
            let p = ModelParams {
                lambda_m, lambda_v, chi, beta, v0,
                dt: 0.01,
                ..ModelParams::baseline()
            };
            prop_assume!(crate::model::stability_report(&p).stable);
            let tr = closed_loop(&p);
            prop_assert!(tr.v.iter().all(|&v| v >= 0.0));
            prop_assert!(tr.u.iter().all(|&u| (p.u_min..=p.u_max).contains(&u)));
            prop_assert!(tr.pi.iter().all(|&x| (0.0..=p.pi_max).contains(&x)));
            let mt = &tr.metrics;
            prop_assert!((0.0..=1.0).contains(&mt.s_u) && (0.0..=1.0).contains(&mt.s_pi));
            prop_assert!(mt.j_pen <= mt.j);
            prop_assert!(mt.j >= 0.0);
            let peak = tr.theta[..tr.n_steps()].iter().fold(0.0_f64, |a, b| a.max(b.abs()));
            prop_assert_eq!(peak, mt.theta_peak);
        }
    }
}
