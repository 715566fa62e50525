//! Quadratic value function, its gradient, projected feedback controls and
//! worst-case distortions.

use serde::{Deserialize, Serialize};

use crate::model::ModelParams;
use crate::riccati::RiccatiCoeffs;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueGradient {
    /// ∂V/∂m
    pub q_m: f64,
    /// ∂V/∂v
    pub q_v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlPair {
    pub u: f64,
    pub pi: f64,
    pub u_saturated: bool,
    pub pi_saturated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionPair {
    pub theta: f64,
    pub xi: f64,
}

pub fn value(a: &RiccatiCoeffs, m: f64, v: f64) -> f64 {
    a.a0 + a.a1 * m + a.a2 * v + a.a11 * m * m + a.a12 * m * v + a.a22 * v * v
}

pub fn gradient(a: &RiccatiCoeffs, m: f64, v: f64) -> ValueGradient {
    ValueGradient {
        q_m: a.a1 + 2.0 * a.a11 * m + a.a12 * v,
        q_v: a.a2 + a.a12 * m + 2.0 * a.a22 * v,
    }
}

/// Unprojected minimizers `(u_fb, pi_fb)`.
pub fn unconstrained_controls(g: &ValueGradient, v: f64, p: &ModelParams) -> (f64, f64) {
    let u = -(p.eta * g.q_m + p.kappa * v) / (2.0 * p.r_u);
    let pi = p.chi * g.q_v / (2.0 * p.r);
    (u, pi)
}

/// Clamp to `[lo, hi]`; the flag is set only for values strictly outside.
pub fn project(x: f64, lo: f64, hi: f64) -> (f64, bool) {
    if x < lo {
        (lo, true)
    } else if x > hi {
        (hi, true)
    } else {
        (x, false)
    }
}

pub fn feedback(g: &ValueGradient, v: f64, p: &ModelParams) -> ControlPair {
    let (u_fb, pi_fb) = unconstrained_controls(g, v, p);
    let (u, u_saturated) = project(u_fb, p.u_min, p.u_max);
    let (pi, pi_saturated) = project(pi_fb, 0.0, p.pi_max);
    ControlPair {
        u,
        pi,
        u_saturated,
        pi_saturated,
    }
}

pub fn worst_case(g: &ValueGradient, p: &ModelParams) -> DistortionPair {
    DistortionPair {
        theta: 2.0 * p.lambda_m * g.q_m,
        xi: 2.0 * p.lambda_v * g.q_v,
    }
}

/// Entropy penalty `z²/(4λ)`; zero when the adversary is switched off.
pub fn kl_penalty(z: f64, lambda: f64) -> f64 {
    if lambda > 0.0 {
        z * z / (4.0 * lambda)
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn terminal() -> RiccatiCoeffs {
        RiccatiCoeffs::terminal(&ModelParams::baseline())
    }

    #[test]
    fn value_examples() {
        assert_eq!(value(&RiccatiCoeffs::default(), 3.0, -2.0), 0.0);
        assert!((value(&terminal(), 0.5, 1.0) - 0.625).abs() < 1e-15);
        let linear = RiccatiCoeffs::from_array([0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(value(&linear, 3.0, 7.0), 3.0);
    }

    #[test]
    fn gradient_examples() {
        let g = gradient(&terminal(), 0.5, 1.0);
        assert_eq!((g.q_m, g.q_v), (0.5, 0.5));
        let g = gradient(&RiccatiCoeffs::default(), 0.5, 1.0);
        assert_eq!((g.q_m, g.q_v), (0.0, 0.0));
    }

    #[test]
    fn feedback_at_terminal_data_is_interior() {
        let p = ModelParams::baseline();
        let c = feedback(&gradient(&terminal(), 0.5, 1.0), 1.0, &p);
        assert!((c.u - (-0.45)).abs() < 1e-15);
        assert!((c.pi - 0.5).abs() < 1e-15);
        assert!(!c.u_saturated && !c.pi_saturated);
    }

    #[test]
    fn feedback_saturates_outside_bounds() {
        let p = ModelParams::baseline();
        // u_fb = -(0.8 q_m)/1.0 = -1.7
        let c = feedback(&ValueGradient { q_m: 2.125, q_v: 0.1 }, 0.0, &p);
        assert_eq!(c.u, -1.0);
        assert!(c.u_saturated);
        let c = feedback(&ValueGradient { q_m: 0.0, q_v: -0.3 }, 0.0, &p);
        assert_eq!(c.pi, 0.0);
        assert!(c.pi_saturated);
    }

    #[test]
    fn value_exactly_at_a_bound_is_not_saturated() {
        assert_eq!(project(1.0, -1.0, 1.0), (1.0, false));
        assert_eq!(project(-1.0, -1.0, 1.0), (-1.0, false));
    }

    #[test]
    fn worst_case_examples() {
        let p = ModelParams::baseline();
        let d = worst_case(&ValueGradient { q_m: 0.5, q_v: 0.5 }, &p);
        assert!((d.theta - 0.02).abs() < 1e-15 && (d.xi - 0.02).abs() < 1e-15);
        let p0 = ModelParams {
            lambda_m: 0.0,
            lambda_v: 0.0,
            ..p
        };
        let d = worst_case(&ValueGradient { q_m: 0.5, q_v: 0.5 }, &p0);
        assert_eq!((d.theta, d.xi), (0.0, 0.0));
    }

    /// Brute-force maximization of `z q - z²/(4λ)` over a grid on [-1, 1].
    fn grid_sup(q: f64, lambda: f64, step: f64) -> (f64, f64) {
        let n = (2.0 / step).round() as usize;
        (0..=n)
            .map(|k| -1.0 + k as f64 * step)
            .map(|z| (z, z * q - z * z / (4.0 * lambda)))
            .fold((0.0, f64::NEG_INFINITY), |best, cur| {
                if cur.1 > best.1 {
                    cur
                } else {
                    best
                }
            })
    }

    #[test]
    fn kl_dual_grid_search() {
        let (z, val) = grid_sup(0.7, 0.02, 1e-5);
        assert!((z - 0.028).abs() < 1e-4);
        assert!((val - 0.0098).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn kl_dual_identity(q in -5.0..5.0f64, lambda in 0.01..0.2f64) {
            // keep the maximizer 2λq inside the search interval
            prop_assume!((2.0 * lambda * q).abs() < 0.95);
            let (z, val) = grid_sup(q, lambda, 1e-4);
            let p = ModelParams { lambda_m: lambda, ..ModelParams::baseline() };
            let d = worst_case(&ValueGradient { q_m: q, q_v: 0.0 }, &p);
            prop_assert!((z - d.theta).abs() <= 1e-4);
            prop_assert!((val - lambda * q * q).abs() <= 1e-6);
        }

        #[test]
        fn projection_is_idempotent(q_m in -3.0..3.0f64, q_v in -3.0..3.0f64, v in 0.0..5.0f64) {
            let p = ModelParams::baseline();
            let c = feedback(&ValueGradient { q_m, q_v }, v, &p);
            let (u2, su) = project(c.u, p.u_min, p.u_max);
            let (pi2, sp) = project(c.pi, 0.0, p.pi_max);
            prop_assert_eq!((u2, pi2), (c.u, c.pi));
            prop_assert!(!su && !sp);
        }

        #[test]
        fn rate_falls_with_variance_when_coupled(q_m in -3.0..3.0f64, v in 0.0..5.0f64, dv in 0.01..1.0f64) {
            let p = ModelParams::baseline();
            let g = ValueGradient { q_m, q_v: 0.0 };
            let (u1, _) = unconstrained_controls(&g, v, &p);
            let (u2, _) = unconstrained_controls(&g, v + dv, &p);
            prop_assert!(u2 < u1);
        }

        #[test]
        fn gradient_matches_central_differences(
            a in prop::array::uniform6(-2.0..2.0f64),
            m in -5.0..5.0f64,
            v in 0.0..5.0f64,
        ) {
            let c = RiccatiCoeffs::from_array(a);
            let h = 1e-6;
            let g = gradient(&c, m, v);
            let fm = (value(&c, m + h, v) - value(&c, m - h, v)) / (2.0 * h);
            let fv = (value(&c, m, v + h) - value(&c, m, v - h)) / (2.0 * h);
            prop_assert!((g.q_m - fm).abs() <= 1e-6 * (1.0 + g.q_m.abs()));
            prop_assert!((g.q_v - fv).abs() <= 1e-6 * (1.0 + g.q_v.abs()));
        }
    }
}
