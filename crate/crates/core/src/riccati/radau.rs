//! Three-stage Radau IIA (order 5) with adaptive step control, embedded
//! error estimate and collocation dense output.
//!
//! Integrates an autonomous system `y' = f(y)` forward in its own independent
//! variable. Stage equations are solved by simplified Newton iterations on the
//! full `3D x 3D` system with the analytic Jacobian frozen at the start of the
//! step; a diverging iteration shrinks the step.

use nalgebra::{DMatrix, DVector};

const SQ6: f64 = 2.449_489_742_783_178;

const C: [f64; 3] = [(4.0 - SQ6) / 10.0, (4.0 + SQ6) / 10.0, 1.0];

const A: [[f64; 3]; 3] = [
    [
        (88.0 - 7.0 * SQ6) / 360.0,
        (296.0 - 169.0 * SQ6) / 1800.0,
        (-2.0 + 3.0 * SQ6) / 225.0,
    ],
    [
        (296.0 + 169.0 * SQ6) / 1800.0,
        (88.0 + 7.0 * SQ6) / 360.0,
        (-2.0 - 3.0 * SQ6) / 225.0,
    ],
    [(16.0 - SQ6) / 36.0, (16.0 + SQ6) / 36.0, 1.0 / 9.0],
];

// Embedded error estimate weights (Hairer & Wanner, RADAU5).
const DD: [f64; 3] = [
    -(13.0 + 7.0 * SQ6) / 3.0,
    (-13.0 + 7.0 * SQ6) / 3.0,
    -1.0 / 3.0,
];

/// Autonomous ODE with an analytic Jacobian.
pub trait StiffSystem<const D: usize> {
    fn rhs(&self, y: &[f64; D]) -> [f64; D];
    fn jacobian(&self, y: &[f64; D]) -> [[f64; D]; D];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadauOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    /// Upper bound on the step; also bounds the dense-output interpolation error.
    pub h_max: f64,
    /// Step-size floor; going below it ends the integration.
    pub h_min: f64,
    /// Any |y_i| above this ends the integration as an explosion.
    pub guard: f64,
    pub max_steps: usize,
    pub max_newton: usize,
}

impl Default for RadauOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            h_init: 1e-3,
            h_max: 0.02,
            h_min: 1e-12,
            guard: 1e8,
            max_steps: 5_000_000,
            max_newton: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Termination {
    Completed,
    /// The last accepted step ended with a component above the guard.
    Guard { s: f64 },
    /// The step size fell below `h_min`. `s` is the end of the last accepted step.
    Underflow {
        s: f64,
        newton_failure: bool,
        max_abs: f64,
        rejections: usize,
    },
    StepBudget { s: f64 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Stats {
    pub accepted: usize,
    pub rejected: usize,
    pub newton_failures: usize,
}

#[derive(Debug, Clone)]
pub struct Outcome<const D: usize> {
    /// Values at the leading requested output points that were reached.
    pub values: Vec<[f64; D]>,
    pub termination: Termination,
    pub stats: Stats,
}

fn scaled_norm<const D: usize>(e: &[f64], y0: &[f64; D], y1: &[f64; D], o: &RadauOptions) -> f64 {
    let mut acc = 0.0;
    for (i, ei) in e.iter().enumerate() {
        let k = i % D;
        let sc = o.atol + o.rtol * y0[k].abs().max(y1[k].abs());
        acc += (ei / sc).powi(2);
    }
    (acc / e.len() as f64).sqrt()
}

fn max_abs<const D: usize>(y: &[f64; D]) -> f64 {
    y.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

fn add<const D: usize>(y: &[f64; D], z: &[f64]) -> [f64; D] {
    let mut out = *y;
    for i in 0..D {
        out[i] += z[i];
    }
    out
}

/// Collocation polynomial of one accepted step, expressed as increments over y0.
struct DenseStep<const D: usize> {
    s0: f64,
    h: f64,
    y0: [f64; D],
    z: [[f64; D]; 3],
}

impl<const D: usize> DenseStep<D> {
    fn eval(&self, s: f64) -> [f64; D] {
        let tau = (s - self.s0) / self.h;
        // Lagrange basis on nodes 0, c1, c2, 1; the node at 0 carries a zero increment.
        let nodes = [0.0, C[0], C[1], C[2]];
        let mut out = self.y0;
        for j in 1..4 {
            let mut l = 1.0;
            for (k, &nk) in nodes.iter().enumerate() {
                if k != j {
                    l *= (tau - nk) / (nodes[j] - nk);
                }
            }
            for i in 0..D {
                out[i] += l * self.z[j - 1][i];
            }
        }
        out
    }
}

enum StageResult<const D: usize> {
    Converged([[f64; D]; 3]),
    Diverged,
}

fn solve_stages<const D: usize, S: StiffSystem<D>>(
    sys: &S,
    y0: &[f64; D],
    h: f64,
    lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    o: &RadauOptions,
) -> StageResult<D> {
    let n = 3 * D;
    let mut z = DVector::<f64>::zeros(n);
    let fnewt = (10.0 * f64::EPSILON / o.rtol).max(0.03_f64.min(o.rtol.sqrt())).max(1e-2);
    let mut prev_norm = f64::INFINITY;
    let mut eta: f64 = 1.0;

    for iter in 0..o.max_newton {
        let mut f = [[0.0; D]; 3];
        for (j, fj) in f.iter_mut().enumerate() {
            let yj = add(y0, &z.as_slice()[j * D..(j + 1) * D]);
            *fj = sys.rhs(&yj);
            if fj.iter().any(|v| !v.is_finite()) {
                return StageResult::Diverged;
            }
        }
        // Residual G(Z) = Z - h (A ⊗ I) F(y0 + Z).
        let mut g = DVector::<f64>::zeros(n);
        for i in 0..3 {
            for k in 0..D {
                let mut acc = 0.0;
                for (j, fj) in f.iter().enumerate() {
                    acc += A[i][j] * fj[k];
                }
                g[i * D + k] = -(z[i * D + k] - h * acc);
            }
        }
        let dz = match lu.solve(&g) {
            Some(dz) => dz,
            None => return StageResult::Diverged,
        };
        if dz.iter().any(|v| !v.is_finite()) {
            return StageResult::Diverged;
        }
        let norm = scaled_norm::<D>(dz.as_slice(), y0, y0, o);
        z += &dz;
        if iter > 0 {
            let theta = norm / prev_norm;
            if theta >= 0.99 {
                if norm <= fnewt {
                    break;
                }
                return StageResult::Diverged;
            }
            eta = theta / (1.0 - theta);
        }
        if eta * norm <= fnewt || norm == 0.0 {
            let mut out = [[0.0; D]; 3];
            for (j, oj) in out.iter_mut().enumerate() {
                oj.copy_from_slice(&z.as_slice()[j * D..(j + 1) * D]);
            }
            return StageResult::Converged(out);
        }
        prev_norm = norm;
        if iter + 1 == o.max_newton {
            return StageResult::Diverged;
        }
    }
    let mut out = [[0.0; D]; 3];
    for (j, oj) in out.iter_mut().enumerate() {
        oj.copy_from_slice(&z.as_slice()[j * D..(j + 1) * D]);
    }
    StageResult::Converged(out)
}

/// Integrate from `s = 0` to `s_end`, reporting the solution at each of the
/// increasing `outputs` (all within `[0, s_end]`). The value at `s = 0` is
/// returned as `y0` itself, bit for bit.
pub fn integrate<const D: usize, S: StiffSystem<D>>(
    sys: &S,
    y0: [f64; D],
    s_end: f64,
    outputs: &[f64],
    opts: &RadauOptions,
) -> Outcome<D> {
    let mut values = Vec::with_capacity(outputs.len());
    let mut next_out = 0;
    while next_out < outputs.len() && outputs[next_out] <= 0.0 {
        values.push(y0);
        next_out += 1;
    }

    let mut stats = Stats::default();
    let mut s = 0.0;
    let mut y = y0;
    let mut h = opts.h_init.min(opts.h_max).min(s_end);
    let mut first = true;
    let mut last_rejected = false;
    let mut consecutive_rejections = 0usize;
    let mut newton_failed_last = false;

    while s < s_end {
        if stats.accepted + stats.rejected >= opts.max_steps {
            return Outcome {
                values,
                termination: Termination::StepBudget { s },
                stats,
            };
        }
        if h < opts.h_min {
            return Outcome {
                values,
                termination: Termination::Underflow {
                    s,
                    newton_failure: newton_failed_last,
                    max_abs: max_abs(&y),
                    rejections: consecutive_rejections,
                },
                stats,
            };
        }
        let remaining = s_end - s;
        let mut last_step = false;
        if h >= remaining * (1.0 - 1e-12) {
            h = remaining;
            last_step = true;
        }

        let jac_rows = sys.jacobian(&y);
        let newton_matrix = DMatrix::<f64>::from_fn(3 * D, 3 * D, |r, c| {
            let (bi, i) = (r / D, r % D);
            let (bj, j) = (c / D, c % D);
            let id = if r == c { 1.0 } else { 0.0 };
            id - h * A[bi][bj] * jac_rows[i][j]
        });
        let lu = newton_matrix.lu();

        let z = match solve_stages(sys, &y, h, &lu, opts) {
            StageResult::Converged(z) => z,
            StageResult::Diverged => {
                stats.newton_failures += 1;
                stats.rejected += 1;
                consecutive_rejections += 1;
                newton_failed_last = true;
                last_rejected = true;
                h *= 0.5;
                continue;
            }
        };
        newton_failed_last = false;

        let y1 = add(&y, &z[2]);
        let f0 = sys.rhs(&y);

        // err = (γ I - J)^{-1} (f(y0) + Σ dd_i z_i / h), γ = 1/(h γ0)
        let gamma0 = 1.0 / ((6.0 + 81.0_f64.cbrt() - 9.0_f64.cbrt()) / 30.0);
        let fac = gamma0 / h;
        let e_matrix = DMatrix::<f64>::from_fn(D, D, |i, j| {
            let id = if i == j { fac } else { 0.0 };
            id - jac_rows[i][j]
        });
        let e_lu = e_matrix.lu();
        let f2: Vec<f64> = (0..D)
            .map(|k| (DD[0] * z[0][k] + DD[1] * z[1][k] + DD[2] * z[2][k]) / h)
            .collect();
        let solve_err = |f: &[f64; D]| -> Vec<f64> {
            let rhs = DVector::<f64>::from_fn(D, |k, _| f[k] + f2[k]);
            match e_lu.solve(&rhs) {
                Some(x) => x.as_slice().to_vec(),
                None => vec![f64::INFINITY; D],
            }
        };
        let mut err_vec = solve_err(&f0);
        let mut err = scaled_norm::<D>(&err_vec, &y, &y1, opts);
        if err >= 1.0 && (first || last_rejected) {
            let f_pert = sys.rhs(&add(&y, &err_vec));
            err_vec = solve_err(&f_pert);
            err = scaled_norm::<D>(&err_vec, &y, &y1, opts);
        }
        if !err.is_finite() {
            err = 1e6;
        }

        let factor = (0.9 * err.max(1e-10).powf(-0.25)).clamp(0.2, 8.0);
        if err <= 1.0 {
            let dense = DenseStep { s0: s, h, y0: y, z };
            let s_new = if last_step { s_end } else { s + h };
            let exploded = y1.iter().any(|v| !v.is_finite() || v.abs() > opts.guard);
            if exploded {
                stats.accepted += 1;
                return Outcome {
                    values,
                    termination: Termination::Guard { s: s_new },
                    stats,
                };
            }
            while next_out < outputs.len() && outputs[next_out] <= s_new {
                let so = outputs[next_out];
                values.push(if so >= s_new { y1 } else { dense.eval(so) });
                next_out += 1;
            }
            s = s_new;
            y = y1;
            stats.accepted += 1;
            first = false;
            consecutive_rejections = 0;
            let grow = if last_rejected { factor.min(1.0) } else { factor };
            last_rejected = false;
            h = (h * grow).min(opts.h_max);
        } else {
            stats.rejected += 1;
            consecutive_rejections += 1;
            last_rejected = true;
            h *= factor.min(1.0);
        }
    }

    // Outputs numerically equal to s_end that were not reached by rounding.
    while next_out < outputs.len() {
        values.push(y);
        next_out += 1;
    }

    Outcome {
        values,
        termination: Termination::Completed,
        stats,
    }
}
