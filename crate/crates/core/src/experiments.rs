//! Parameter sweeps: symmetric and asymmetric adversary strength, the
//! robustness-efficiency grid, single-parameter sensitivity and the
//! loss-of-control map, plus breakdown-threshold bisection.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::forward::{simulate, Metrics};
use crate::io::fmt_num;
use crate::model::{stability_report, ModelParams, ParamField};
use crate::riccati::{solve_aligned, solve_backward, RiccatiStatus};

/// Worker pool with deterministic, index-ordered gathering.
pub struct Executor {
    pool: rayon::ThreadPool,
}

impl Executor {
    /// `None` uses one worker per logical CPU.
    pub fn new(workers: Option<usize>) -> Result<Self> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = workers {
            if n == 0 {
                return Err(Error::InvalidArgument("workers must be at least 1".into()));
            }
            builder = builder.num_threads(n);
        }
        let pool = builder.build().map_err(|e| Error::Pool(e.to_string()))?;
        Ok(Self { pool })
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// Results come back in input order regardless of completion order.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        self.pool.install(|| items.par_iter().map(f).collect())
    }
}

/// `n` evenly spaced points from `start` to `stop` inclusive.
pub fn linspace(start: f64, stop: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..n)
            .map(|k| {
                if k == n - 1 {
                    stop
                } else {
                    start + (stop - start) * k as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Axis {
    pub name: String,
    pub values: Vec<f64>,
}

impl Axis {
    pub fn new(field: ParamField, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument(format!("grid for {field} is empty")));
        }
        if values.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument(format!(
                "grid for {field} must be strictly increasing"
            )));
        }
        Ok(Self {
            name: field.name().to_string(),
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Why a cell carries no metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    /// A stability margin is non-positive.
    Unstable,
    /// Margins are positive but the backward solve exploded.
    BlowUp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellOutcome {
    pub status: CellStatus,
    pub metrics: Option<Metrics>,
}

impl CellOutcome {
    pub fn masked(&self) -> bool {
        self.status != CellStatus::Ok
    }
}

/// One backward solve plus one closed-loop forward pass, masked on breakdown.
pub fn evaluate_cell(p: &ModelParams) -> Result<CellOutcome> {
    let p = p.validated()?;
    if !stability_report(&p).stable {
        return Ok(CellOutcome {
            status: CellStatus::Unstable,
            metrics: None,
        });
    }
    let sol = solve_aligned(&p)?;
    if !sol.is_bounded() {
        return Ok(CellOutcome {
            status: CellStatus::BlowUp,
            metrics: None,
        });
    }
    Ok(CellOutcome {
        status: CellStatus::Ok,
        metrics: Some(simulate(&p, &sol)?.metrics),
    })
}

/// Rectangular grid of cells stored row-major (last axis fastest).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub base: ModelParams,
    pub axes: Vec<Axis>,
    pub cells: Vec<CellOutcome>,
    /// Other fields that vary jointly with the axis values, e.g. the
    /// symmetric sweep sets both adversary strengths from one axis.
    pub tied: Vec<String>,
}

impl SweepResult {
    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(Axis::len).collect()
    }

    pub fn breakdown_mask(&self) -> Vec<bool> {
        self.cells.iter().map(CellOutcome::masked).collect()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.axes)
            .fold(0, |acc, (&i, ax)| acc * ax.len() + i)
    }

    pub fn cell(&self, idx: &[usize]) -> &CellOutcome {
        &self.cells[self.flat_index(idx)]
    }

    pub fn metrics(&self, idx: &[usize]) -> Option<&Metrics> {
        self.cell(idx).metrics.as_ref()
    }

    /// Axis values of every cell, in storage order.
    pub fn coordinates(&self) -> Vec<Vec<f64>> {
        let shape = self.shape();
        let total: usize = shape.iter().product();
        (0..total)
            .map(|mut flat| {
                let mut coords = vec![0.0; shape.len()];
                for d in (0..shape.len()).rev() {
                    coords[d] = self.axes[d].values[flat % shape[d]];
                    flat /= shape[d];
                }
                coords
            })
            .collect()
    }

    /// Time-at-bounds layer `S_u + S_pi` (`None` where masked).
    pub fn saturation_layer(&self) -> Vec<Option<f64>> {
        self.cells
            .iter()
            .map(|c| c.metrics.map(|m| m.s_u + m.s_pi))
            .collect()
    }

    /// Long format: axis values, mask flag, reason, every metric and `S_total`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header: Vec<String> = self.axes.iter().map(|a| a.name.clone()).collect();
        header.push("breakdown".into());
        header.push("status".into());
        header.extend(Metrics::FIELDS.iter().map(|s| s.to_string()));
        header.push("S_total".into());
        writeln!(w, "{}", header.join(","))?;
        for (coords, cell) in self.coordinates().iter().zip(&self.cells) {
            let mut row: Vec<String> = coords.iter().map(|&x| fmt_num(x)).collect();
            row.push(cell.masked().to_string());
            row.push(
                match cell.status {
                    CellStatus::Ok => "ok",
                    CellStatus::Unstable => "unstable",
                    CellStatus::BlowUp => "blowup",
                }
                .into(),
            );
            match &cell.metrics {
                Some(m) => {
                    row.extend(m.values().iter().map(|&x| fmt_num(x)));
                    row.push(fmt_num(m.s_u + m.s_pi));
                }
                None => row.extend(std::iter::repeat_n(
                    "breakdown".to_string(),
                    Metrics::FIELDS.len() + 1,
                )),
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Inputs recorded in the provenance sidecar.
    pub fn provenance(&self) -> Value {
        json!({
            "base_params": self.base,
            "axes": self.axes,
            "tied_fields": self.tied,
            "mask_rule": "non-positive stability margin or backward blow-up",
        })
    }
}

fn sweep(
    exec: &Executor,
    base: &ModelParams,
    axes: Vec<Axis>,
    tied: Vec<String>,
    configure: impl Fn(&[f64]) -> ModelParams + Sync + Send,
) -> Result<SweepResult> {
    let mut result = SweepResult {
        base: *base,
        axes,
        cells: Vec::new(),
        tied,
    };
    let coords = result.coordinates();
    let outcomes = exec.map(&coords, |c| evaluate_cell(&configure(c)));
    result.cells = outcomes.into_iter().collect::<Result<_>>()?;
    Ok(result)
}

/// Symmetric adversary sweep with `λ_m = λ_v = λ`.
pub fn adversary_sweep(exec: &Executor, base: &ModelParams, lambdas: &[f64]) -> Result<SweepResult> {
    let axis = Axis {
        name: "lambda".into(),
        values: Axis::new(ParamField::LambdaM, lambdas.to_vec())?.values,
    };
    sweep(
        exec,
        base,
        vec![axis],
        vec!["lambda_m".into(), "lambda_v".into()],
        |c| ModelParams {
            lambda_m: c[0],
            lambda_v: c[0],
            ..*base
        },
    )
}

pub fn default_adversary_grid() -> Vec<f64> {
    linspace(0.0, 0.2, 25)
}

/// The asymmetric `(λ_m, λ_v)` cases, followed by a near-zero control case.
pub const ASYMMETRIC_CASES: [(f64, f64); 5] = [
    (0.001, 0.1),
    (0.001, 0.2),
    (0.1, 0.001),
    (0.2, 0.001),
    (0.001, 0.001),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AsymmetricCase {
    pub lambda_m: f64,
    pub lambda_v: f64,
    pub outcome: CellOutcome,
}

pub fn asymmetric_cases(exec: &Executor, base: &ModelParams) -> Result<Vec<AsymmetricCase>> {
    let outcomes = exec.map(&ASYMMETRIC_CASES, |&(lambda_m, lambda_v)| {
        evaluate_cell(&ModelParams {
            lambda_m,
            lambda_v,
            ..*base
        })
    });
    ASYMMETRIC_CASES
        .iter()
        .zip(outcomes)
        .map(|(&(lambda_m, lambda_v), o)| {
            Ok(AsymmetricCase {
                lambda_m,
                lambda_v,
                outcome: o?,
            })
        })
        .collect()
}

/// Same layout as [`SweepResult::write_csv`] with `lambda_m,lambda_v` axes.
pub fn write_asymmetric_csv<W: Write>(cases: &[AsymmetricCase], mut w: W) -> Result<()> {
    let mut header = vec!["lambda_m".to_string(), "lambda_v".into(), "breakdown".into()];
    header.extend(Metrics::FIELDS.iter().map(|s| s.to_string()));
    writeln!(w, "{}", header.join(","))?;
    for c in cases {
        let mut row = vec![
            fmt_num(c.lambda_m),
            fmt_num(c.lambda_v),
            c.outcome.masked().to_string(),
        ];
        match &c.outcome.metrics {
            Some(m) => row.extend(m.values().iter().map(|&x| fmt_num(x))),
            None => row.extend(std::iter::repeat_n(
                "breakdown".to_string(),
                Metrics::FIELDS.len(),
            )),
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Robustness-efficiency grid with its two cross-sections.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tradeoff {
    /// Axes `lambda_m` (rows) and `lambda_v` (columns).
    pub grid: SweepResult,
    /// `λ_v` varies with `λ_m` held at the grid node nearest the anchor.
    pub along_lambda_v: SweepResult,
    /// `λ_m` varies with `λ_v` held at the grid node nearest the anchor.
    pub along_lambda_m: SweepResult,
}

/// Anchor value of the fixed strength in the cross-sections.
pub const CROSS_SECTION_ANCHOR: f64 = 0.02;

fn nearest(values: &[f64], x: f64) -> f64 {
    values
        .iter()
        .copied()
        .min_by(|a, b| (a - x).abs().total_cmp(&(b - x).abs()))
        .expect("non-empty grid")
}

pub fn default_tradeoff_grid(n: usize) -> Vec<f64> {
    linspace(0.005, 0.2, n)
}

pub fn tradeoff_grid(
    exec: &Executor,
    base: &ModelParams,
    lm_grid: &[f64],
    lv_grid: &[f64],
) -> Result<Tradeoff> {
    let lm_axis = Axis::new(ParamField::LambdaM, lm_grid.to_vec())?;
    let lv_axis = Axis::new(ParamField::LambdaV, lv_grid.to_vec())?;
    let grid = sweep(
        exec,
        base,
        vec![lm_axis.clone(), lv_axis.clone()],
        Vec::new(),
        |c| ModelParams {
            lambda_m: c[0],
            lambda_v: c[1],
            ..*base
        },
    )?;
    let lm_fixed = nearest(lm_grid, CROSS_SECTION_ANCHOR);
    let lv_fixed = nearest(lv_grid, CROSS_SECTION_ANCHOR);
    let along_lambda_v = sweep(
        exec,
        &ModelParams {
            lambda_m: lm_fixed,
            ..*base
        },
        vec![lv_axis],
        Vec::new(),
        |c| ModelParams {
            lambda_m: lm_fixed,
            lambda_v: c[0],
            ..*base
        },
    )?;
    let along_lambda_m = sweep(
        exec,
        &ModelParams {
            lambda_v: lv_fixed,
            ..*base
        },
        vec![lm_axis],
        Vec::new(),
        |c| ModelParams {
            lambda_m: c[0],
            lambda_v: lv_fixed,
            ..*base
        },
    )?;
    Ok(Tradeoff {
        grid,
        along_lambda_v,
        along_lambda_m,
    })
}

/// Parameters accepted by [`parameter_sensitivity`].
pub const SENSITIVITY_FIELDS: [ParamField; 6] = [
    ParamField::Eta,
    ParamField::Chi,
    ParamField::Beta,
    ParamField::Kappa,
    ParamField::RU,
    ParamField::R,
];

/// Default relative half-width of the sensitivity grids.
pub const SENSITIVITY_SPAN: f64 = 0.6;

/// Symmetric grid `b (1 + span (2k/(n-1) - 1))`; for odd `n` the centre node
/// is exactly the baseline value.
pub fn default_sensitivity_grid(base: &ModelParams, field: ParamField, n: usize) -> Vec<f64> {
    let b = base.get(field);
    if n == 1 {
        return vec![b];
    }
    (0..n)
        .map(|k| {
            let x = 2.0 * k as f64 / (n - 1) as f64 - 1.0;
            b * (1.0 + SENSITIVITY_SPAN * x)
        })
        .collect()
}

pub fn parameter_sensitivity(
    exec: &Executor,
    base: &ModelParams,
    field: ParamField,
    grid: &[f64],
) -> Result<SweepResult> {
    if !SENSITIVITY_FIELDS.contains(&field) {
        return Err(Error::InvalidArgument(format!(
            "sensitivity sweeps support eta, chi, beta, kappa, R_u, R; got {field}"
        )));
    }
    let axis = Axis::new(field, grid.to_vec())?;
    sweep(exec, base, vec![axis], Vec::new(), |c| base.with(field, c[0]))
}

pub fn default_chi_grid() -> Vec<f64> {
    linspace(0.05, 2.975, 40)
}

pub fn default_beta_grid() -> Vec<f64> {
    linspace(0.0125, 0.5, 40)
}

/// Loss-of-control map over `(χ, β)`; axes `chi` (rows) and `beta` (columns).
pub fn loss_map(
    exec: &Executor,
    base: &ModelParams,
    chi_grid: &[f64],
    beta_grid: &[f64],
) -> Result<SweepResult> {
    if chi_grid.iter().chain(beta_grid).any(|&x| !(x > 0.0)) {
        return Err(Error::InvalidArgument(
            "loss-map grids must be strictly positive".into(),
        ));
    }
    let axes = vec![
        Axis::new(ParamField::Chi, chi_grid.to_vec())?,
        Axis::new(ParamField::Beta, beta_grid.to_vec())?,
    ];
    sweep(exec, base, axes, Vec::new(), |c| ModelParams {
        chi: c[0],
        beta: c[1],
        ..*base
    })
}

/// Outcome of bisecting the backward-solve status along one parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdSearch {
    pub field: ParamField,
    pub lo: f64,
    pub hi: f64,
    pub blowup_at_lo: bool,
    pub blowup_at_hi: bool,
    /// Midpoint of the final bracket; `None` when both ends share a status.
    pub estimate: Option<f64>,
    pub iterations: usize,
}

/// Bisection on `field` over `[lo, hi]` for the point where the backward
/// solve switches between bounded and blow-up, to absolute width `tol`.
pub fn breakdown_threshold(
    base: &ModelParams,
    field: ParamField,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<ThresholdSearch> {
    let blows_up = |x: f64| -> Result<bool> {
        let p = base.with(field, x);
        let sol = solve_backward(&p, p.aligned_nodes())?;
        Ok(matches!(sol.status, RiccatiStatus::BlowUp { .. }))
    };
    let (blowup_at_lo, blowup_at_hi) = (blows_up(lo)?, blows_up(hi)?);
    let mut out = ThresholdSearch {
        field,
        lo,
        hi,
        blowup_at_lo,
        blowup_at_hi,
        estimate: None,
        iterations: 0,
    };
    if blowup_at_lo == blowup_at_hi {
        return Ok(out);
    }
    let (mut a, mut b) = (lo, hi);
    while b - a > tol {
        let mid = 0.5 * (a + b);
        if blows_up(mid)? == blowup_at_lo {
            a = mid;
        } else {
            b = mid;
        }
        out.iterations += 1;
    }
    out.estimate = Some(0.5 * (a + b));
    Ok(out)
}
