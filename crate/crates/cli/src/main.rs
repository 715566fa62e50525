//! `rmfc`: command-line driver for the robust mean-field control experiments.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use rmfc_core::experiments::{
    adversary_sweep, asymmetric_cases, default_adversary_grid, default_beta_grid,
    default_chi_grid, default_sensitivity_grid, default_tradeoff_grid, linspace, loss_map,
    parameter_sensitivity, tradeoff_grid, write_asymmetric_csv,
};
use rmfc_core::io::{fmt_num, write_json, write_provenance, Provenance};
use rmfc_core::model::ParamField;
use rmfc_core::particle::poc_experiment;
use rmfc_core::sensitivity::{
    gradcheck, lipschitz_check, robustness_loss_experiment, SensitivityDirection,
    LOSS_DIRECTIONS, SENSITIVE_FIELDS,
};
use rmfc_core::{
    simulate, simulate_nbank, solve_aligned, validate, Error, Executor, ModelParams,
};

#[derive(Parser, Debug)]
#[command(name = "rmfc", version, about = "Robust LQ mean-field control experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat JSON parameter file; missing keys take baseline values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Parameter override `name=value`, applied after the config file.
    #[arg(long = "set", value_name = "NAME=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out", global = true)]
    out: PathBuf,
    /// RNG seed; required by stochastic commands.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: logical CPU count).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Grid override `name=start:stop:count`.
    #[arg(long = "grid", value_name = "NAME=START:STOP:COUNT", global = true)]
    grids: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Closed-loop moment trajectory and metrics.
    Simulate,
    /// Symmetric adversary sweep over lambda = lambda_m = lambda_v.
    SweepAdversary,
    /// Asymmetric (lambda_m, lambda_v) cases.
    Asymmetric,
    /// Robustness-efficiency grid over (lambda_m, lambda_v) with cross-sections.
    Tradeoff {
        /// Nodes per axis of the default grid.
        #[arg(long, default_value_t = 40)]
        nodes: usize,
    },
    /// One-parameter sensitivity sweep.
    Sensitivity {
        /// Swept parameter: eta, chi, beta, kappa, R_u or R.
        #[arg(long)]
        field: String,
        #[arg(long, default_value_t = 41)]
        nodes: usize,
    },
    /// Loss-of-control map over (chi, beta).
    LossMap,
    /// N-bank particle simulation driven by the closed-loop controls.
    Particles {
        #[arg(long, default_value_t = 4096)]
        n: usize,
    },
    /// Propagation-of-chaos experiment.
    Poc {
        #[arg(long, value_delimiter = ',', default_value = "64,256,1024,4096")]
        n_list: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        replications: usize,
    },
    /// Variational sensitivity against central finite differences.
    Gradcheck {
        /// Output nodes of the backward solve.
        #[arg(long, default_value_t = 201)]
        nodes: usize,
    },
    /// Robustness-loss scaling and the Lipschitz comparative statics.
    LossBound {
        #[arg(long, value_delimiter = ',', default_value = "0.02,0.04,0.08,0.16")]
        eps: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.001,0.01,0.05,0.1")]
        deltas: Vec<f64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::SweepAdversary => "sweep-adversary",
            Command::Asymmetric => "asymmetric",
            Command::Tradeoff { .. } => "tradeoff",
            Command::Sensitivity { .. } => "sensitivity",
            Command::LossMap => "loss-map",
            Command::Particles { .. } => "particles",
            Command::Poc { .. } => "poc",
            Command::Gradcheck { .. } => "gradcheck",
            Command::LossBound { .. } => "loss-bound",
        }
    }

    fn stochastic(&self) -> bool {
        matches!(self, Command::Particles { .. } | Command::Poc { .. })
    }
}

/// Errors classified by exit status.
enum Failure {
    Usage(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParams(_) | Error::UnknownParameter(_) | Error::InvalidArgument(_) => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Internal(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Internal(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

struct Grid {
    name: String,
    values: Vec<f64>,
}

fn parse_grid(spec: &str) -> CliResult<Grid> {
    let bad = || Failure::Usage(format!("expected name=start:stop:count, got `{spec}`"));
    let (name, range) = spec.split_once('=').ok_or_else(bad)?;
    let parts: Vec<&str> = range.split(':').collect();
    let [start, stop, count] = parts[..] else {
        return Err(bad());
    };
    let start: f64 = start.trim().parse().map_err(|_| bad())?;
    let stop: f64 = stop.trim().parse().map_err(|_| bad())?;
    let count: usize = count.trim().parse().map_err(|_| bad())?;
    if count == 0 || !start.is_finite() || !stop.is_finite() {
        return Err(bad());
    }
    Ok(Grid {
        name: name.trim().to_string(),
        values: linspace(start, stop, count),
    })
}

struct Grids(Vec<Grid>);

impl Grids {
    fn parse(specs: &[String], allowed: &[&str]) -> CliResult<Self> {
        let grids = specs.iter().map(|s| parse_grid(s)).collect::<CliResult<Vec<_>>>()?;
        if let Some(g) = grids.iter().find(|g| !allowed.contains(&g.name.as_str())) {
            return Err(Failure::Usage(format!(
                "grid `{}` is not accepted here; expected one of: {}",
                g.name,
                if allowed.is_empty() { "none".into() } else { allowed.join(", ") }
            )));
        }
        Ok(Grids(grids))
    }

    fn get(&self, name: &str, default: impl FnOnce() -> Vec<f64>) -> Vec<f64> {
        self.0
            .iter()
            .rev()
            .find(|g| g.name == name)
            .map_or_else(default, |g| g.values.clone())
    }
}

fn load_params(common: &Common) -> CliResult<ModelParams> {
    let mut p = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Failure::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            serde_json::from_str::<ModelParams>(&text).map_err(|e| {
                Failure::Usage(format!("invalid config {}: {e}", path.display()))
            })?
        }
        None => ModelParams::baseline(),
    };
    for o in &common.overrides {
        p.apply_override(o)?;
    }
    let report = validate(&p);
    if !report.is_ok() {
        return Err(Error::InvalidParams(report).into());
    }
    Ok(p)
}

/// Writes outputs with provenance sidecars into the output directory.
struct Outputs<'a> {
    dir: &'a Path,
    command: &'static str,
    inputs: Value,
    start: Instant,
    written: Vec<PathBuf>,
}

impl Outputs<'_> {
    fn finish(&mut self, path: &Path) -> CliResult<()> {
        let prov = Provenance::new(
            self.command,
            self.inputs.clone(),
            self.start.elapsed().as_secs_f64(),
        );
        write_provenance(path, &prov)?;
        self.written.push(path.to_path_buf());
        Ok(())
    }

    fn csv<F>(&mut self, name: &str, write: F) -> CliResult<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> rmfc_core::Result<()>,
    {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        write(&mut w)?;
        w.flush()?;
        self.finish(&path)
    }

    fn json(&mut self, name: &str, value: &Value) -> CliResult<()> {
        let path = self.dir.join(name);
        write_json(&path, value)?;
        self.finish(&path)
    }
}

fn run(cli: Cli) -> CliResult<Vec<PathBuf>> {
    let common = &cli.common;
    let command = &cli.command;
    if command.stochastic() && common.seed.is_none() {
        return Err(Failure::Usage(format!(
            "`{}` is stochastic and requires --seed",
            command.name()
        )));
    }
    if common.workers == Some(0) {
        return Err(Failure::Usage("--workers must be at least 1".into()));
    }
    let p = load_params(common)?;
    let allowed: Vec<&str> = match command {
        Command::SweepAdversary => vec!["lambda"],
        Command::Tradeoff { .. } => vec!["lambda_m", "lambda_v"],
        Command::Sensitivity { field, .. } => vec![field.as_str()],
        Command::LossMap => vec!["chi", "beta"],
        _ => Vec::new(),
    };
    let grids = Grids::parse(&common.grids, &allowed)?;
    fs::create_dir_all(&common.out).map_err(|e| {
        Failure::Usage(format!("output directory {} is not writable: {e}", common.out.display()))
    })?;
    let exec = Executor::new(common.workers)?;
    let mut inputs = json!({
        "params": p,
        "overrides": common.overrides,
        "grids": common.grids,
        "config": common.config.as_ref().map(|c| c.display().to_string()),
        "seed": common.seed,
    });
    let mut out = Outputs {
        dir: &common.out,
        command: command.name(),
        inputs: Value::Null,
        start: Instant::now(),
        written: Vec::new(),
    };

    match command {
        Command::Simulate => {
            out.inputs = inputs;
            let sol = solve_aligned(&p)?;
            if !sol.is_bounded() {
                return Err(Failure::Usage(format!(
                    "Riccati solution breaks down: {:?}",
                    sol.status
                )));
            }
            let tr = simulate(&p, &sol)?;
            out.csv("trajectory.csv", |w| tr.write_csv(w))?;
            out.json("metrics.json", &serde_json::to_value(tr.metrics).map_err(Error::from)?)?;
        }
        Command::SweepAdversary => {
            let lambdas = grids.get("lambda", default_adversary_grid);
            inputs["lambda"] = json!(lambdas);
            out.inputs = inputs;
            let r = adversary_sweep(&exec, &p, &lambdas)?;
            out.csv("adversary.csv", |w| r.write_csv(w))?;
        }
        Command::Asymmetric => {
            out.inputs = inputs;
            let cases = asymmetric_cases(&exec, &p)?;
            out.csv("asymmetric.csv", |w| write_asymmetric_csv(&cases, w))?;
        }
        Command::Tradeoff { nodes } => {
            let lm = grids.get("lambda_m", || default_tradeoff_grid(*nodes));
            let lv = grids.get("lambda_v", || default_tradeoff_grid(*nodes));
            inputs["lambda_m"] = json!(lm);
            inputs["lambda_v"] = json!(lv);
            out.inputs = inputs;
            let t = tradeoff_grid(&exec, &p, &lm, &lv)?;
            out.csv("tradeoff_grid.csv", |w| t.grid.write_csv(w))?;
            out.csv("tradeoff_lambda_v.csv", |w| t.along_lambda_v.write_csv(w))?;
            out.csv("tradeoff_lambda_m.csv", |w| t.along_lambda_m.write_csv(w))?;
        }
        Command::Sensitivity { field, nodes } => {
            let f: ParamField = field.parse()?;
            let grid = grids.get(field, || default_sensitivity_grid(&p, f, *nodes));
            inputs["field"] = json!(field);
            inputs[field.as_str()] = json!(grid);
            out.inputs = inputs;
            let r = parameter_sensitivity(&exec, &p, f, &grid)?;
            out.csv(&format!("sensitivity_{field}.csv"), |w| r.write_csv(w))?;
        }
        Command::LossMap => {
            let chi = grids.get("chi", default_chi_grid);
            let beta = grids.get("beta", default_beta_grid);
            inputs["chi"] = json!(chi);
            inputs["beta"] = json!(beta);
            out.inputs = inputs;
            let r = loss_map(&exec, &p, &chi, &beta)?;
            out.csv("loss_map.csv", |w| r.write_csv(w))?;
            let saturation: Vec<Value> = r
                .saturation_layer()
                .into_iter()
                .map(|s| s.map_or(Value::Null, |x| json!(x)))
                .collect();
            out.json(
                "loss_map_saturation.json",
                &json!({ "chi": chi, "beta": beta, "saturation_total": saturation }),
            )?;
        }
        Command::Particles { n } => {
            let seed = common.seed.expect("checked above");
            inputs["n"] = json!(n);
            out.inputs = inputs;
            let sol = solve_aligned(&p)?;
            if !sol.is_bounded() {
                return Err(Failure::Usage(format!(
                    "Riccati solution breaks down: {:?}",
                    sol.status
                )));
            }
            let tr = simulate(&p, &sol)?;
            let steps = p.n_steps();
            let ens = simulate_nbank(&p, *n, seed, &tr.u[..steps], &tr.theta[..steps])?;
            out.csv("particles.csv", |w| {
                writeln!(w, "t,m_emp,v_emp,m_closed_loop,v_closed_loop")?;
                for k in 0..ens.times.len() {
                    writeln!(
                        w,
                        "{},{},{},{},{}",
                        fmt_num(ens.times[k]),
                        fmt_num(ens.m_emp[k]),
                        fmt_num(ens.v_emp[k]),
                        fmt_num(tr.m[k]),
                        fmt_num(tr.v[k])
                    )?;
                }
                Ok(())
            })?;
        }
        Command::Poc { n_list, replications } => {
            let seed = common.seed.expect("checked above");
            inputs["n_list"] = json!(n_list);
            inputs["replications"] = json!(replications);
            out.inputs = inputs;
            let r = poc_experiment(&exec, &p, n_list, *replications, seed)?;
            out.csv("poc.csv", |w| r.write_csv(w))?;
            out.json("poc_summary.json", &r.summary_json())?;
        }
        Command::Gradcheck { nodes } => {
            if *nodes < 2 {
                return Err(Failure::Usage("--nodes must be at least 2".into()));
            }
            inputs["nodes"] = json!(nodes);
            out.inputs = inputs;
            let rows = gradcheck(&p, &SENSITIVE_FIELDS, *nodes)?;
            out.csv("gradcheck.csv", |w| {
                writeln!(w, "field,max_rel_error,passed")?;
                for r in &rows {
                    writeln!(w, "{},{},{}", r.field, fmt_num(r.max_rel_error), r.passed)?;
                }
                Ok(())
            })?;
            if let Some(r) = rows.iter().find(|r| !r.passed) {
                return Err(Failure::Internal(format!(
                    "gradient check failed for {} (relative error {:e})",
                    r.field, r.max_rel_error
                )));
            }
        }
        Command::LossBound { eps, deltas } => {
            inputs["eps"] = json!(eps);
            inputs["deltas"] = json!(deltas);
            out.inputs = inputs;
            let mut summaries = Vec::new();
            for dir in LOSS_DIRECTIONS {
                let r = robustness_loss_experiment(&p, dir, eps)?;
                out.csv(&format!("loss_bound_{dir}.csv"), |w| r.write_csv(w))?;
                summaries.push(r.summary_json());
            }
            let mut lipschitz = Vec::new();
            for field in LOSS_DIRECTIONS {
                let dir = SensitivityDirection::unit(field)?;
                let r = lipschitz_check(&p, &dir, deltas)?;
                lipschitz.push(json!({ "direction": field.name(), "report": r }));
            }
            out.json(
                "loss_bound_summary.json",
                &json!({ "loss": summaries, "lipschitz": lipschitz }),
            )?;
        }
    }
    Ok(out.written)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(1)
        }
    }
}
