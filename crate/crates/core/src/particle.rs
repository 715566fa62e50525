//! N-bank particle system with idiosyncratic and common noise, and the
//! synchronous-coupling experiment against independent mean-field copies.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::experiments::Executor;
use crate::forward::simulate;
use crate::io::fmt_num;
use crate::model::ModelParams;
use crate::riccati::solve_aligned;

/// Paths of the mean-field copies driven by the same increments as the banks.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledLimit {
    /// Final positions of the copies.
    pub banks: Vec<f64>,
    /// Mean of the limit law given the common noise.
    pub m_cond: Vec<f64>,
    /// Variance of the limit law given the common noise.
    pub v_cond: Vec<f64>,
    /// `max_i |L_i - Y_i|` per node.
    pub max_gap: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub n: usize,
    pub seed: u64,
    pub replication: u64,
    pub times: Vec<f64>,
    /// Final bank positions.
    pub banks: Vec<f64>,
    pub m_emp: Vec<f64>,
    /// Unbiased (divisor `N - 1`) cross-sectional variance.
    pub v_emp: Vec<f64>,
    pub coupled_limit: Option<CoupledLimit>,
}

/// Standard normal draws consumed by the simulation.
trait NoiseSource {
    fn initial(&mut self, bank: usize) -> f64;
    fn common(&mut self) -> f64;
    fn idiosyncratic(&mut self, bank: usize) -> f64;
}

/// One ChaCha stream for the common noise and one per bank, all keyed by
/// `(seed, N, replication)`.
struct StreamNoise {
    common: ChaCha8Rng,
    banks: Vec<ChaCha8Rng>,
}

impl StreamNoise {
    fn new(seed: u64, n: usize, replication: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&(n as u64).to_le_bytes());
        key[16..24].copy_from_slice(&replication.to_le_bytes());
        let root = ChaCha8Rng::from_seed(key);
        let stream = |id: u64| {
            let mut r = root.clone();
            r.set_stream(id);
            r
        };
        Self {
            common: stream(0),
            banks: (0..n as u64).map(|i| stream(i + 1)).collect(),
        }
    }
}

impl NoiseSource for StreamNoise {
    fn initial(&mut self, bank: usize) -> f64 {
        self.banks[bank].sample(StandardNormal)
    }
    fn common(&mut self) -> f64 {
        self.common.sample(StandardNormal)
    }
    fn idiosyncratic(&mut self, bank: usize) -> f64 {
        self.banks[bank].sample(StandardNormal)
    }
}

/// Mean computed relative to the first entry, so identical entries give the
/// exact common value.
fn shifted_mean(x: &[f64]) -> f64 {
    let x0 = x[0];
    x0 + x.iter().map(|xi| xi - x0).sum::<f64>() / x.len() as f64
}

fn unbiased_variance(x: &[f64], mean: f64) -> f64 {
    x.iter().map(|xi| (xi - mean).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

fn input_at(path: &[f64], k: usize) -> f64 {
    path[k.min(path.len() - 1)]
}

fn check_inputs(p: &ModelParams, n: usize, u_path: &[f64], theta_path: &[f64]) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "at least two banks are required, got {n}"
        )));
    }
    let steps = p.n_steps();
    for (what, path) in [("u_path", u_path), ("theta_path", theta_path)] {
        if path.len() != steps && path.len() != steps + 1 {
            return Err(Error::LengthMismatch {
                what,
                expected: steps + 1,
                got: path.len(),
            });
        }
    }
    Ok(())
}

fn run<N: NoiseSource>(
    p: &ModelParams,
    n: usize,
    u_path: &[f64],
    theta_path: &[f64],
    noise: &mut N,
    coupled: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Option<CoupledLimit>) {
    let steps = p.n_steps();
    let dt = p.step();
    let sq = dt.sqrt();
    let sd0 = p.v0.sqrt();
    let decay = (1.0 - p.beta * dt).powi(2);

    let mut x: Vec<f64> = (0..n).map(|i| p.m0 + sd0 * noise.initial(i)).collect();
    let mut y = if coupled { x.clone() } else { Vec::new() };
    let (mut m_ref, mut v_ref) = (p.m0, p.v0);

    let times: Vec<f64> = (0..=steps)
        .map(|k| if k == steps { p.horizon } else { k as f64 * dt })
        .collect();
    let mut m_emp = Vec::with_capacity(steps + 1);
    let mut v_emp = Vec::with_capacity(steps + 1);
    let mut m_cond = Vec::new();
    let mut v_cond = Vec::new();
    let mut max_gap = Vec::new();

    for k in 0..=steps {
        let m_n = shifted_mean(&x);
        m_emp.push(m_n);
        v_emp.push(unbiased_variance(&x, m_n));
        if coupled {
            m_cond.push(m_ref);
            v_cond.push(v_ref);
            max_gap.push(
                x.iter()
                    .zip(&y)
                    .fold(0.0_f64, |g, (a, b)| g.max((a - b).abs())),
            );
        }
        if k == steps {
            break;
        }
        let drive = p.eta * input_at(u_path, k) + input_at(theta_path, k);
        let common = p.sigma_c * sq * noise.common();
        for i in 0..n {
            let idio = p.sigma_l * sq * noise.idiosyncratic(i);
            x[i] = x[i] + (-p.beta * (x[i] - m_n) + drive) * dt + idio + common;
            if coupled {
                y[i] = y[i] + (-p.beta * (y[i] - m_ref) + drive) * dt + idio + common;
            }
        }
        if coupled {
            m_ref = m_ref + drive * dt + common;
            v_ref = decay * v_ref + p.sigma_l * p.sigma_l * dt;
        }
    }

    let limit = coupled.then(|| CoupledLimit {
        banks: y,
        m_cond,
        v_cond,
        max_gap,
    });
    (times, x, m_emp, v_emp, limit)
}

fn simulate_streams(
    p: &ModelParams,
    n: usize,
    seed: u64,
    replication: u64,
    u_path: &[f64],
    theta_path: &[f64],
    coupled: bool,
) -> Result<ParticleEnsemble> {
    let p = p.validated()?;
    check_inputs(&p, n, u_path, theta_path)?;
    let mut noise = StreamNoise::new(seed, n, replication);
    let (times, banks, m_emp, v_emp, coupled_limit) =
        run(&p, n, u_path, theta_path, &mut noise, coupled);
    Ok(ParticleEnsemble {
        n,
        seed,
        replication,
        times,
        banks,
        m_emp,
        v_emp,
        coupled_limit,
    })
}

/// Euler-Maruyama simulation of `N` banks driven by the given rate and mean
/// distortion paths. Initial positions are i.i.d. `Normal(m0, v0)`.
pub fn simulate_nbank(
    p: &ModelParams,
    n: usize,
    seed: u64,
    u_path: &[f64],
    theta_path: &[f64],
) -> Result<ParticleEnsemble> {
    simulate_streams(p, n, seed, 0, u_path, theta_path, false)
}

/// As [`simulate_nbank`], together with `N` mean-field copies that consume
/// the identical initial draws and increments.
pub fn simulate_coupled(
    p: &ModelParams,
    n: usize,
    seed: u64,
    replication: u64,
    u_path: &[f64],
    theta_path: &[f64],
) -> Result<ParticleEnsemble> {
    simulate_streams(p, n, seed, replication, u_path, theta_path, true)
}

fn rms(x: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = x.fold((0.0, 0usize), |(s, c), v| (s + v * v, c + 1));
    (sum / count as f64).sqrt()
}

/// Error statistics of one `(N, replication)` run; each is a root mean
/// square over the time grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PocRow {
    pub n: usize,
    pub replication: u64,
    /// `max_i |L_i - Y_i|`
    pub bank_gap: f64,
    /// `|m^N - m|` with `m` the conditional mean of the limit.
    pub mean_error: f64,
    /// `|v^N - v|` with `v` the conditional variance of the limit.
    pub var_error: f64,
    /// `|m^N - m|` against the deterministic closed-loop mean.
    pub det_mean_error: f64,
    /// `|v^N - v|` against the deterministic closed-loop variance.
    pub det_var_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeFit {
    /// Least-squares slope of log(mean error) against log(N).
    pub slope: f64,
    /// 1.96 standard errors of the slope fitted to all replications.
    pub half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PocSummary {
    pub n_list: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    /// Replication-averaged statistics per N.
    pub mean_bank_gap: Vec<f64>,
    pub mean_mean_error: Vec<f64>,
    pub mean_var_error: Vec<f64>,
    pub bank_gap: SlopeFit,
    pub mean_error: SlopeFit,
    pub var_error: SlopeFit,
    /// Successive ratios of the averaged moment errors between adjacent N.
    pub mean_error_ratios: Vec<f64>,
    pub var_error_ratios: Vec<f64>,
    pub reference_note: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PocReport {
    pub rows: Vec<PocRow>,
    pub summary: PocSummary,
}

impl PocReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "N,replication,bank_gap,mean_error,var_error,det_mean_error,det_var_error"
        )?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.n,
                r.replication,
                fmt_num(r.bank_gap),
                fmt_num(r.mean_error),
                fmt_num(r.var_error),
                fmt_num(r.det_mean_error),
                fmt_num(r.det_var_error)
            )?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> Value {
        json!(self.summary)
    }
}

/// Ordinary least squares `y = a + b x`; returns `(b, standard error of b)`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let sse: f64 = x.iter().zip(y).map(|(u, v)| (v - a - b * u).powi(2)).sum();
    let se = if x.len() > 2 {
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    (b, se)
}

fn fit(n_list: &[usize], rows: &[PocRow], stat: impl Fn(&PocRow) -> f64) -> (Vec<f64>, SlopeFit) {
    let means: Vec<f64> = n_list
        .iter()
        .map(|&n| {
            let vals: Vec<f64> = rows.iter().filter(|r| r.n == n).map(&stat).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();
    let lx: Vec<f64> = n_list.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = means.iter().map(|m| m.ln()).collect();
    let (slope, _) = ols_slope(&lx, &ly);
    let all_x: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let all_y: Vec<f64> = rows.iter().map(|r| stat(r).ln()).collect();
    let (_, se) = ols_slope(&all_x, &all_y);
    (
        means,
        SlopeFit {
            slope,
            half_width: 1.96 * se,
        },
    )
}

/// Synchronous-coupling experiment driven by the closed-loop feedback paths.
pub fn poc_experiment(
    exec: &Executor,
    p: &ModelParams,
    n_list: &[usize],
    replications: usize,
    seed: u64,
) -> Result<PocReport> {
    let p = p.validated()?;
    if n_list.is_empty() || n_list.windows(2).any(|w| w[1] <= w[0]) || n_list[0] < 2 {
        return Err(Error::InvalidArgument(
            "N list must be increasing with every entry at least 2".into(),
        ));
    }
    if replications == 0 {
        return Err(Error::InvalidArgument("replications must be at least 1".into()));
    }
    let sol = solve_aligned(&p)?;
    let tr = simulate(&p, &sol)?;

    let tasks: Vec<(usize, u64)> = n_list
        .iter()
        .flat_map(|&n| (0..replications as u64).map(move |r| (n, r)))
        .collect();
    let rows = exec.map(&tasks, |&(n, replication)| -> Result<PocRow> {
        let e = simulate_coupled(&p, n, seed, replication, &tr.u, &tr.theta)?;
        let lim = e.coupled_limit.as_ref().expect("coupled run");
        let diff = |a: &[f64], b: &[f64]| rms(a.iter().zip(b).map(|(x, y)| (x - y).abs()));
        Ok(PocRow {
            n,
            replication,
            bank_gap: rms(lim.max_gap.iter().copied()),
            mean_error: diff(&e.m_emp, &lim.m_cond),
            var_error: diff(&e.v_emp, &lim.v_cond),
            det_mean_error: diff(&e.m_emp, &tr.m),
            det_var_error: diff(&e.v_emp, &tr.v),
        })
    });
    let rows: Vec<PocRow> = rows.into_iter().collect::<Result<_>>()?;

    let (mean_bank_gap, bank_gap) = fit(n_list, &rows, |r| r.bank_gap);
    let (mean_mean_error, mean_error) = fit(n_list, &rows, |r| r.mean_error);
    let (mean_var_error, var_error) = fit(n_list, &rows, |r| r.var_error);
    let ratios = |v: &[f64]| v.windows(2).map(|w| w[1] / w[0]).collect::<Vec<_>>();
    let summary = PocSummary {
        n_list: n_list.to_vec(),
        replications,
        seed,
        mean_error_ratios: ratios(&mean_mean_error),
        var_error_ratios: ratios(&mean_var_error),
        mean_bank_gap,
        mean_mean_error,
        mean_var_error,
        bank_gap,
        mean_error,
        var_error,
        reference_note: "moment errors are measured against the limit law conditional on the \
            common noise; det_* columns use the deterministic closed-loop moments, which \
            omit the common-noise displacement of the mean and do not shrink with N",
    };
    Ok(PocReport { rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> ModelParams {
        ModelParams {
            sigma_l: 0.0,
            sigma_c: 0.0,
            v0: 0.0,
            dt: 0.01,
            ..ModelParams::baseline()
        }
    }

    fn zeros(p: &ModelParams) -> Vec<f64> {
        vec![0.0; p.n_steps()]
    }

    #[test]
    fn deterministic_identical_banks_stay_put() {
        let p = quiet();
        let z = zeros(&p);
        let e = simulate_nbank(&p, 16, 7, &z, &z).unwrap();
        assert!(e.m_emp.iter().all(|&m| m == p.m0));
        assert!(e.v_emp.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn common_noise_cancels_in_the_cross_section() {
        let p = ModelParams {
            sigma_c: 0.5,
            ..quiet()
        };
        let z = zeros(&p);
        let e = simulate_nbank(&p, 32, 11, &z, &z).unwrap();
        assert!(e.v_emp.iter().all(|&v| v == 0.0));
        assert!(e.m_emp.iter().any(|&m| m != p.m0));
    }

    #[test]
    fn too_few_banks_is_rejected() {
        let p = quiet();
        let z = zeros(&p);
        assert!(simulate_nbank(&p, 1, 0, &z, &z).is_err());
        assert!(simulate_nbank(&p, 4, 0, &z[..3], &z).is_err());
    }

    #[test]
    fn seed_determinism_and_sensitivity() {
        let p = ModelParams {
            dt: 0.01,
            ..ModelParams::baseline()
        };
        let z = zeros(&p);
        let a = simulate_nbank(&p, 64, 42, &z, &z).unwrap();
        let b = simulate_nbank(&p, 64, 42, &z, &z).unwrap();
        let c = simulate_nbank(&p, 64, 43, &z, &z).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.m_emp, c.m_emp);
    }

    /// Pre-drawn noise that can be handed out under a bank permutation.
    struct Table {
        initial: Vec<f64>,
        common: Vec<f64>,
        idio: Vec<Vec<f64>>,
        perm: Vec<usize>,
        step: usize,
    }

    impl NoiseSource for Table {
        fn initial(&mut self, bank: usize) -> f64 {
            self.initial[self.perm[bank]]
        }
        fn common(&mut self) -> f64 {
            let z = self.common[self.step];
            self.step += 1;
            z
        }
        fn idiosyncratic(&mut self, bank: usize) -> f64 {
            self.idio[self.step - 1][self.perm[bank]]
        }
    }

    #[test]
    fn permuting_banks_leaves_moments_unchanged() {
        let p = ModelParams {
            dt: 0.05,
            ..ModelParams::baseline()
        };
        let n = 12;
        let steps = p.n_steps();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut draw = || -> f64 { rng.sample(StandardNormal) };
        let initial: Vec<f64> = (0..n).map(|_| draw()).collect();
        let common: Vec<f64> = (0..steps).map(|_| draw()).collect();
        let idio: Vec<Vec<f64>> = (0..steps).map(|_| (0..n).map(|_| draw()).collect()).collect();
        let make = |perm: Vec<usize>| Table {
            initial: initial.clone(),
            common: common.clone(),
            idio: idio.clone(),
            perm,
            step: 0,
        };
        let z = zeros(&p);
        let id: Vec<usize> = (0..n).collect();
        let rev: Vec<usize> = (0..n).rev().collect();
        let (_, _, m1, v1, _) = run(&p, n, &z, &z, &mut make(id), false);
        let (_, _, m2, v2, _) = run(&p, n, &z, &z, &mut make(rev), false);
        for k in 0..=steps {
            assert!((m1[k] - m2[k]).abs() < 1e-12);
            assert!((v1[k] - v2[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_variance_is_non_negative() {
        let p = ModelParams {
            dt: 0.01,
            ..ModelParams::baseline()
        };
        let z = zeros(&p);
        let e = simulate_nbank(&p, 50, 3, &z, &z).unwrap();
        assert!(e.v_emp.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn idiosyncratic_only_mean_tracks_the_closed_loop_mean() {
        let p = ModelParams {
            sigma_c: 0.0,
            ..ModelParams::baseline()
        };
        let tr = simulate(&p, &solve_aligned(&p).unwrap()).unwrap();
        let e = simulate_nbank(&p, 4096, 2024, &tr.u, &tr.theta).unwrap();
        let sup = e
            .m_emp
            .iter()
            .zip(&tr.m)
            .fold(0.0_f64, |g, (a, b)| g.max((a - b).abs()));
        assert!(sup < 0.1, "sup = {sup}");
    }

    #[test]
    fn baseline_mean_tracks_the_conditional_mean() {
        let p = ModelParams::baseline();
        let tr = simulate(&p, &solve_aligned(&p).unwrap()).unwrap();
        let e = simulate_coupled(&p, 4096, 2024, 0, &tr.u, &tr.theta).unwrap();
        let lim = e.coupled_limit.unwrap();
        let sup = e
            .m_emp
            .iter()
            .zip(&lim.m_cond)
            .fold(0.0_f64, |g, (a, b)| g.max((a - b).abs()));
        assert!(sup < 0.1, "sup = {sup}");
    }

    #[test]
    fn noiseless_coupling_errors_vanish() {
        let p = quiet();
        let exec = Executor::new(Some(2)).unwrap();
        let rep = poc_experiment(&exec, &p, &[4, 16], 2, 9).unwrap();
        for r in &rep.rows {
            assert_eq!((r.bank_gap, r.mean_error, r.var_error), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn coupling_error_shrinks_with_n() {
        let p = ModelParams {
            dt: 0.01,
            ..ModelParams::baseline()
        };
        let exec = Executor::new(Some(4)).unwrap();
        let rep = poc_experiment(&exec, &p, &[16, 64, 256], 6, 77).unwrap();
        let median = |n: usize| {
            let mut v: Vec<f64> = rep.rows.iter().filter(|r| r.n == n).map(|r| r.bank_gap).collect();
            v.sort_by(f64::total_cmp);
            0.5 * (v[2] + v[3])
        };
        assert!(median(64) < median(16));
        assert!(median(256) < median(64));
        assert!(rep.summary.bank_gap.slope < 0.0);
    }

    #[test]
    fn ols_recovers_an_exact_line() {
        let (b, se) = ols_slope(&[0.0, 1.0, 2.0, 3.0], &[1.0, 3.0, 5.0, 7.0]);
        assert!((b - 2.0).abs() < 1e-12 && se.abs() < 1e-12);
    }
}
