//! Directional parameter sensitivity of the Riccati coefficients, Lipschitz
//! comparative statics of the value function and the robustness-loss
//! experiment under model mismatch.

use std::io::Write;

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::forward::simulate_mixed;
use crate::io::fmt_num;
use crate::model::{stability_report, validate, ModelParams, ParamField};
use crate::policy::value;
use crate::riccati::{
    rhs_jacobian, rhs_param_partial, riccati_rhs, solve_aligned, solve_backward_with,
    RadauOptions, RiccatiCoeffs, RiccatiSolution, RiccatiStatus,
};

/// Parameters that may carry a nonzero direction component.
pub const SENSITIVE_FIELDS: [ParamField; 14] = [
    ParamField::Beta,
    ParamField::Eta,
    ParamField::Chi,
    ParamField::SigmaL,
    ParamField::SigmaC,
    ParamField::W1,
    ParamField::W2Bar,
    ParamField::Kappa,
    ParamField::RU,
    ParamField::R,
    ParamField::LambdaM,
    ParamField::LambdaV,
    ParamField::GM,
    ParamField::GV,
];

/// Perturbation direction `δΘ` over [`SENSITIVE_FIELDS`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SensitivityDirection {
    pub weights: [f64; 14],
}

impl SensitivityDirection {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn unit(field: ParamField) -> Result<Self> {
        Self::from_pairs(&[(field, 1.0)])
    }

    pub fn from_pairs(pairs: &[(ParamField, f64)]) -> Result<Self> {
        let mut d = Self::zero();
        for &(field, w) in pairs {
            let k = SENSITIVE_FIELDS
                .iter()
                .position(|&f| f == field)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("{field} is not a sensitivity parameter"))
                })?;
            d.weights[k] += w;
        }
        Ok(d)
    }

    pub fn weight(&self, field: ParamField) -> f64 {
        SENSITIVE_FIELDS
            .iter()
            .position(|&f| f == field)
            .map_or(0.0, |k| self.weights[k])
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            weights: self.weights.map(|w| c * w),
        }
    }

    pub fn norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// `params + h δΘ`
    pub fn apply(&self, p: &ModelParams, h: f64) -> ModelParams {
        let mut q = *p;
        for (f, w) in SENSITIVE_FIELDS.iter().zip(self.weights) {
            if w != 0.0 {
                q.set(*f, p.get(*f) + h * w);
            }
        }
        q
    }

    /// Derivative of the terminal data along the direction.
    pub fn terminal(&self) -> RiccatiCoeffs {
        RiccatiCoeffs {
            a2: self.weight(ParamField::GV),
            a11: self.weight(ParamField::GM),
            ..RiccatiCoeffs::default()
        }
    }

    /// Directional derivative of the right-hand side with respect to parameters.
    pub fn forcing(&self, a: &RiccatiCoeffs, p: &ModelParams) -> [f64; 6] {
        let mut out = [0.0; 6];
        for (f, w) in SENSITIVE_FIELDS.iter().zip(self.weights) {
            if w != 0.0 {
                let d = rhs_param_partial(a, p, *f).to_array();
                for i in 0..6 {
                    out[i] += w * d[i];
                }
            }
        }
        out
    }
}

/// `Δa(t)` on the Riccati grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityPath {
    pub times: Vec<f64>,
    pub delta_a: Vec<RiccatiCoeffs>,
}

impl SensitivityPath {
    pub fn at(&self, t: f64) -> Result<RiccatiCoeffs> {
        let horizon = *self.times.last().expect("non-empty path");
        if !(0.0..=horizon).contains(&t) {
            return Err(Error::TimeOutOfRange { t, horizon });
        }
        let k = self.times.partition_point(|&tk| tk <= t);
        if k == 0 {
            return Ok(self.delta_a[0]);
        }
        if k >= self.times.len() {
            return Ok(*self.delta_a.last().unwrap());
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        Ok(self.delta_a[k - 1].lerp(&self.delta_a[k], (t - t0) / (t1 - t0)))
    }
}

fn mat_vec(j: &[[f64; 6]; 6], x: &[f64; 6]) -> [f64; 6] {
    std::array::from_fn(|r| (0..6).map(|c| j[r][c] * x[c]).sum())
}

/// Integrate the variational equation `dΔ/ds = D_aF Δ + D_ΘF δΘ` from the
/// terminal node along the stored grid (classical RK4, one step per grid
/// interval, midpoint coefficients by cubic Hermite interpolation).
pub fn solve_sensitivity(
    p: &ModelParams,
    sol: &RiccatiSolution,
    dir: &SensitivityDirection,
) -> Result<SensitivityPath> {
    if let RiccatiStatus::BlowUp { t_star } = sol.status {
        return Err(Error::BlowUpSolution { t_star });
    }
    let n = sol.times.len();
    let rhs = |a: &RiccatiCoeffs, x: &[f64; 6]| -> [f64; 6] {
        let jx = mat_vec(&rhs_jacobian(a, p), x);
        let b = dir.forcing(a, p);
        std::array::from_fn(|i| jx[i] + b[i])
    };
    let mut out = vec![RiccatiCoeffs::default(); n];
    let mut x = dir.terminal().to_array();
    out[n - 1] = RiccatiCoeffs::from_array(x);
    for k in (0..n - 1).rev() {
        // s runs from node k+1 (closer to T) to node k.
        let h = sol.times[k + 1] - sol.times[k];
        let (a0, a1) = (sol.coeffs[k + 1], sol.coeffs[k]);
        let (f0, f1) = (riccati_rhs(&a0, p).to_array(), riccati_rhs(&a1, p).to_array());
        let (v0, v1) = (a0.to_array(), a1.to_array());
        let mid = RiccatiCoeffs::from_array(std::array::from_fn(|i| {
            0.5 * (v0[i] + v1[i]) + h * (f0[i] - f1[i]) / 8.0
        }));
        let step = |x: &[f64; 6], d: &[f64; 6], w: f64| -> [f64; 6] {
            std::array::from_fn(|i| x[i] + w * d[i])
        };
        let k1 = rhs(&a0, &x);
        let k2 = rhs(&mid, &step(&x, &k1, 0.5 * h));
        let k3 = rhs(&mid, &step(&x, &k2, 0.5 * h));
        let k4 = rhs(&a1, &step(&x, &k3, h));
        x = std::array::from_fn(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        out[k] = RiccatiCoeffs::from_array(x);
    }
    Ok(SensitivityPath {
        times: sol.times.clone(),
        delta_a: out,
    })
}

/// `ΔV(t, m, v)`: the coefficient sensitivity contracted with the monomials.
pub fn value_sensitivity(path: &SensitivityPath, t: f64, m: f64, v: f64) -> Result<f64> {
    Ok(value(&path.at(t)?, m, v))
}

/// Tolerances used by the finite-difference oracles.
pub fn tight_options() -> RadauOptions {
    RadauOptions {
        rtol: 1e-12,
        atol: 1e-14,
        ..RadauOptions::default()
    }
}

/// Central difference `(a(Θ + hδΘ) - a(Θ - hδΘ)) / 2h` on `n_nodes` nodes.
pub fn finite_difference_path(
    p: &ModelParams,
    n_nodes: usize,
    dir: &SensitivityDirection,
    h: f64,
    opts: &RadauOptions,
) -> Result<SensitivityPath> {
    let up = solve_backward_with(&dir.apply(p, h), n_nodes, opts)?;
    let dn = solve_backward_with(&dir.apply(p, -h), n_nodes, opts)?;
    for s in [&up, &dn] {
        if let RiccatiStatus::BlowUp { t_star } = s.status {
            return Err(Error::BlowUpSolution { t_star });
        }
    }
    let delta_a = up
        .coeffs
        .iter()
        .zip(&dn.coeffs)
        .map(|(a, b)| {
            let (a, b) = (a.to_array(), b.to_array());
            RiccatiCoeffs::from_array(std::array::from_fn(|i| (a[i] - b[i]) / (2.0 * h)))
        })
        .collect();
    Ok(SensitivityPath {
        times: up.times,
        delta_a,
    })
}

/// `max |Δa - FD| / (1 + |Δa|)` over nodes and components.
pub fn max_relative_error(exact: &SensitivityPath, fd: &SensitivityPath) -> f64 {
    exact
        .delta_a
        .iter()
        .zip(&fd.delta_a)
        .flat_map(|(a, b)| {
            let (a, b) = (a.to_array(), b.to_array());
            (0..6).map(move |i| (a[i] - b[i]).abs() / (1.0 + a[i].abs()))
        })
        .fold(0.0, f64::max)
}

/// Finite-difference step used by every oracle.
pub const FD_STEP: f64 = 1e-5;
/// Pass threshold of the gradient check.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub field: ParamField,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Compare the variational solution with central differences along each
/// unit direction in `fields`.
pub fn gradcheck(p: &ModelParams, fields: &[ParamField], n_nodes: usize) -> Result<Vec<GradcheckRow>> {
    let opts = tight_options();
    let base = solve_backward_with(p, n_nodes, &opts)?;
    fields
        .iter()
        .map(|&field| {
            let dir = SensitivityDirection::unit(field)?;
            let exact = solve_sensitivity(p, &base, &dir)?;
            let fd = finite_difference_path(p, n_nodes, &dir, FD_STEP, &opts)?;
            let err = max_relative_error(&exact, &fd);
            Ok(GradcheckRow {
                field,
                max_rel_error: err,
                passed: err <= GRADCHECK_TOL,
            })
        })
        .collect()
}

/// States at which the Lipschitz ratio is evaluated.
pub fn lipschitz_state_sample() -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for m in [-2.0, -1.0, 0.0, 1.0, 2.0] {
        for v in [0.0, 0.5, 1.0, 2.0] {
            out.push((m, v));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzRow {
    pub delta: f64,
    /// `max |ΔV| / (δ ‖δΘ‖ (1 + m² + v²))`; `None` when masked.
    pub ratio: Option<f64>,
    pub masked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzReport {
    pub rows: Vec<LipschitzRow>,
    pub max_ratio: Option<f64>,
    pub times: Vec<f64>,
    pub states: Vec<(f64, f64)>,
}

fn usable(p: &ModelParams) -> Result<Option<RiccatiSolution>> {
    if !validate(p).is_ok() || !stability_report(p).stable {
        return Ok(None);
    }
    let sol = solve_aligned(p)?;
    Ok(sol.is_bounded().then_some(sol))
}

/// Empirical Lipschitz constant of the value function along `dir`.
pub fn lipschitz_check(
    p: &ModelParams,
    dir: &SensitivityDirection,
    deltas: &[f64],
) -> Result<LipschitzReport> {
    let p = p.validated()?;
    let base = usable(&p)?.ok_or_else(|| {
        Error::InvalidArgument("base parameters are outside the stable region".into())
    })?;
    let n = base.times.len() - 1;
    let nodes: Vec<usize> = (0..=4).map(|q| q * n / 4).collect();
    let times: Vec<f64> = nodes.iter().map(|&k| base.times[k]).collect();
    let states = lipschitz_state_sample();
    let norm = dir.norm();
    let mut rows = Vec::new();
    for &delta in deltas {
        if delta == 0.0 || norm == 0.0 {
            rows.push(LipschitzRow {
                delta,
                ratio: Some(0.0),
                masked: false,
            });
            continue;
        }
        let Some(pert) = usable(&dir.apply(&p, delta))? else {
            rows.push(LipschitzRow {
                delta,
                ratio: None,
                masked: true,
            });
            continue;
        };
        let mut worst = 0.0_f64;
        for &k in &nodes {
            for &(m, v) in &states {
                let dv = value(&pert.coeffs[k], m, v) - value(&base.coeffs[k], m, v);
                worst = worst.max(dv.abs() / (delta.abs() * norm * (1.0 + m * m + v * v)));
            }
        }
        rows.push(LipschitzRow {
            delta,
            ratio: Some(worst),
            masked: false,
        });
    }
    let max_ratio = rows.iter().filter_map(|r| r.ratio).reduce(f64::max);
    Ok(LipschitzReport {
        rows,
        max_ratio,
        times,
        states,
    })
}

/// Fields accepted as drift directions in the robustness-loss experiment.
pub const LOSS_DIRECTIONS: [ParamField; 2] = [ParamField::Beta, ParamField::Eta];

pub const ADVERSARY_PROTOCOL: &str = "the adversary plays the worst-case linear feedback of \
    the true model; the controller uses the feedback of the design model";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRow {
    pub eps: f64,
    /// Realized penalized cost minus the true-model value; `None` when masked.
    pub gap: Option<f64>,
    pub realized_cost: Option<f64>,
    pub true_value: Option<f64>,
    pub masked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub direction: ParamField,
    pub rows: Vec<LossRow>,
    /// Least-squares slope of log gap against log ε over unmasked ε > 0.
    pub slope: Option<f64>,
    pub adversary_protocol: &'static str,
}

impl LossReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "direction,eps,gap,realized_cost,true_value,masked")?;
        let opt = |x: Option<f64>| x.map_or_else(|| "breakdown".to_string(), fmt_num);
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                self.direction,
                fmt_num(r.eps),
                opt(r.gap),
                opt(r.realized_cost),
                opt(r.true_value),
                r.masked
            )?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> Value {
        json!({
            "direction": self.direction.name(),
            "slope": self.slope,
            "adversary_protocol": self.adversary_protocol,
            "rows": self.rows,
        })
    }
}

/// Penalized cost of the design controller under `truth`, Richardson-extrapolated
/// over the steps `dt` and `dt / 2` to cancel the first-order Euler bias.
/// `None` when either model is unusable or any trajectory saturates.
fn realized_cost(design: &ModelParams, truth: &ModelParams) -> Result<Option<(f64, f64)>> {
    let mut costs = [0.0; 2];
    let mut v0 = 0.0;
    for (k, cost) in costs.iter_mut().enumerate() {
        let refine = (1 << k) as f64;
        let d = ModelParams {
            dt: design.dt / refine,
            ..*design
        };
        let t = ModelParams {
            dt: truth.dt / refine,
            ..*truth
        };
        let (Some(sol_d), Some(sol_t)) = (usable(&d)?, usable(&t)?) else {
            return Ok(None);
        };
        let realized = simulate_mixed(&t, (&d, &sol_d), (&t, &sol_t), false)?;
        let matched = simulate_mixed(&t, (&t, &sol_t), (&t, &sol_t), false)?;
        if [&realized, &matched]
            .iter()
            .any(|tr| tr.metrics.s_u > 0.0 || tr.metrics.s_pi > 0.0)
        {
            return Ok(None);
        }
        *cost = realized.metrics.j_pen;
        v0 = value(&sol_t.coeffs[0], t.m0, t.v0);
    }
    Ok(Some((2.0 * costs[1] - costs[0], v0)))
}

/// Cost of running the design-model controller in the true model
/// `Θ' = Θ + ε e_dir`, relative to the true-model value at `(0, m0, v0)`.
pub fn robustness_loss_experiment(
    p: &ModelParams,
    direction: ParamField,
    eps_list: &[f64],
) -> Result<LossReport> {
    if !LOSS_DIRECTIONS.contains(&direction) {
        return Err(Error::InvalidArgument(format!(
            "drift direction must be beta or eta, got {direction}"
        )));
    }
    let p = p.validated()?;
    if usable(&p)?.is_none() {
        return Err(Error::InvalidArgument(
            "design parameters are outside the stable region".into(),
        ));
    }
    let mut rows = Vec::new();
    for &eps in eps_list {
        let truth = p.with(direction, p.get(direction) + eps);
        rows.push(match realized_cost(&p, &truth)? {
            Some((cost, v0)) => LossRow {
                eps,
                gap: Some(cost - v0),
                realized_cost: Some(cost),
                true_value: Some(v0),
                masked: false,
            },
            None => LossRow {
                eps,
                gap: None,
                realized_cost: None,
                true_value: None,
                masked: true,
            },
        });
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| match r.gap {
            Some(g) if r.eps > 0.0 && g > 0.0 => Some((r.eps.ln(), g.ln())),
            _ => None,
        })
        .collect();
    let slope = (pts.len() >= 2).then(|| {
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        crate::particle::ols_slope(&x, &y).0
    });
    Ok(LossReport {
        direction,
        rows,
        slope,
        adversary_protocol: ADVERSARY_PROTOCOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn base() -> ModelParams {
        ModelParams::baseline()
    }

    fn path(dir: &SensitivityDirection) -> SensitivityPath {
        let p = base();
        solve_sensitivity(&p, &solve_aligned(&p).unwrap(), dir).unwrap()
    }

    #[test]
    fn terminal_sensitivities() {
        let gm = path(&SensitivityDirection::unit(ParamField::GM).unwrap());
        assert_eq!(
            gm.delta_a.last().unwrap().to_array(),
            [0.0, 0.0, 0.0, 1.0, 0.0, 0.0]
        );
        let eta = path(&SensitivityDirection::unit(ParamField::Eta).unwrap());
        assert_eq!(eta.delta_a.last().unwrap().to_array(), [0.0; 6]);
        let gv = path(&SensitivityDirection::unit(ParamField::GV).unwrap());
        assert_eq!(value_sensitivity(&gv, 10.0, 0.7, 1.3).unwrap(), 1.3);
    }

    #[test]
    fn zero_direction_gives_zero_path() {
        let z = path(&SensitivityDirection::zero());
        assert!(z.delta_a.iter().all(|c| c.to_array() == [0.0; 6]));
        assert_eq!(value_sensitivity(&z, 3.0, 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn excluded_fields_are_rejected() {
        assert!(SensitivityDirection::unit(ParamField::UMax).is_err());
        assert!(SensitivityDirection::unit(ParamField::Dt).is_err());
    }

    #[test]
    fn eta_direction_matches_finite_differences() {
        let p = base();
        let dir = SensitivityDirection::unit(ParamField::Eta).unwrap();
        let n = p.aligned_nodes();
        let sol = solve_backward_with(&p, n, &tight_options()).unwrap();
        let exact = solve_sensitivity(&p, &sol, &dir).unwrap();
        let fd = finite_difference_path(&p, n, &dir, FD_STEP, &tight_options()).unwrap();
        assert!(max_relative_error(&exact, &fd) <= GRADCHECK_TOL);
    }

    #[test]
    fn value_sensitivity_matches_value_differences() {
        let p = base();
        let dir = SensitivityDirection::unit(ParamField::Eta).unwrap();
        let sol = solve_backward_with(&p, p.aligned_nodes(), &tight_options()).unwrap();
        let dv = value_sensitivity(&solve_sensitivity(&p, &sol, &dir).unwrap(), 0.0, 0.5, 1.0)
            .unwrap();
        let at = |q: &ModelParams| {
            let s = solve_backward_with(q, q.aligned_nodes(), &tight_options()).unwrap();
            value(&s.coeffs[0], 0.5, 1.0)
        };
        let fd = (at(&dir.apply(&p, FD_STEP)) - at(&dir.apply(&p, -FD_STEP))) / (2.0 * FD_STEP);
        assert!((dv - fd).abs() <= 1e-4 * fd.abs().max(1e-12), "{dv} vs {fd}");
    }

    #[test]
    fn blown_up_base_is_rejected() {
        let p = base().with(ParamField::LambdaM, 0.5);
        let sol = solve_aligned(&p).unwrap();
        assert!(solve_sensitivity(&p, &sol, &SensitivityDirection::zero()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn sensitivity_is_linear_in_the_direction(
            w in prop::array::uniform14(-1.0..1.0f64),
            c in -3.0..3.0f64,
        ) {
            let p = ModelParams { dt: 0.01, ..base() };
            let sol = solve_aligned(&p).unwrap();
            let dir = SensitivityDirection { weights: w };
            let a = solve_sensitivity(&p, &sol, &dir).unwrap();
            let b = solve_sensitivity(&p, &sol, &dir.scaled(c)).unwrap();
            for (x, y) in a.delta_a.iter().zip(&b.delta_a) {
                for (xi, yi) in x.to_array().iter().zip(y.to_array()) {
                    prop_assert!((c * xi - yi).abs() <= 1e-10 * (1.0 + yi.abs()));
                }
            }
        }
    }

    #[test]
    fn lipschitz_ratios_stay_bounded() {
        let p = ModelParams { dt: 0.01, ..base() };
        let dir = SensitivityDirection::unit(ParamField::Chi).unwrap();
        let r = lipschitz_check(&p, &dir, &[0.0, 1e-3, 1e-2, 1e-1]).unwrap();
        assert_eq!(r.rows[0].ratio, Some(0.0));
        let ratios: Vec<f64> = r.rows[1..].iter().map(|x| x.ratio.unwrap()).collect();
        let (lo, hi) = ratios
            .iter()
            .fold((f64::INFINITY, 0.0_f64), |(a, b), &x| (a.min(x), b.max(x)));
        assert!(hi < 3.0 * lo, "{ratios:?}");
    }

    #[test]
    fn lipschitz_masks_unstable_perturbations() {
        let p = ModelParams { dt: 0.01, ..base() };
        let dir = SensitivityDirection::unit(ParamField::LambdaV).unwrap();
        // λ_v* = 0.25; 0.02 + 0.3 crosses it
        let r = lipschitz_check(&p, &dir, &[0.3]).unwrap();
        assert!(r.rows[0].masked);
    }

    #[test]
    fn robustness_loss_is_quadratic_and_non_negative() {
        let r = robustness_loss_experiment(&base(), ParamField::Beta, &[0.02, 0.04, 0.08, 0.16])
            .unwrap();
        for row in &r.rows {
            assert!(!row.masked);
            assert!(row.gap.unwrap() >= -1e-8);
        }
        let s = r.slope.unwrap();
        assert!((1.6..=2.4).contains(&s), "slope {s}");
    }

    #[test]
    fn matched_model_has_no_loss() {
        let r = robustness_loss_experiment(&base(), ParamField::Beta, &[0.0]).unwrap();
        assert!(r.rows[0].gap.unwrap().abs() < 1e-5);
        assert!(robustness_loss_experiment(&base(), ParamField::Chi, &[0.01]).is_err());
    }
}
