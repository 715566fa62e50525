//! Model parameters, validation, and the stability margins that decide
//! whether the backward Riccati system can stay bounded.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Full parameter vector of the liquidity model plus the time grid.
///
/// Field names in the serialized form are the canonical configuration keys
/// (`sigma_L`, `R_u`, `G_m`, `T`, ...). Missing keys fall back to the
/// baseline values, so a config file may list only the overrides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    pub beta: f64,
    pub eta: f64,
    pub chi: f64,
    #[serde(rename = "sigma_L")]
    pub sigma_l: f64,
    pub sigma_c: f64,
    pub w1: f64,
    pub w2_bar: f64,
    pub kappa: f64,
    #[serde(rename = "R_u")]
    pub r_u: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "G_m")]
    pub g_m: f64,
    #[serde(rename = "G_v")]
    pub g_v: f64,
    pub lambda_m: f64,
    pub lambda_v: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub pi_max: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub dt: f64,
    pub m0: f64,
    pub v0: f64,
}

impl ModelParams {
    /// The baseline calibration used throughout the experiments.
    pub const fn baseline() -> Self {
        Self {
            beta: 0.25,
            eta: 0.8,
            chi: 0.5,
            sigma_l: 0.4,
            sigma_c: 0.3,
            w1: 0.1,
            w2_bar: 0.5,
            kappa: 0.05,
            r_u: 0.5,
            r: 0.25,
            g_m: 0.5,
            g_v: 0.5,
            lambda_m: 0.02,
            lambda_v: 0.02,
            u_min: -1.0,
            u_max: 1.0,
            pi_max: 10.0,
            horizon: 10.0,
            dt: 0.001,
            m0: 0.5,
            v0: 1.0,
        }
    }

    /// Total variance forcing σ_L² + σ_c².
    pub fn sigma_sq(&self) -> f64 {
        self.sigma_l * self.sigma_l + self.sigma_c * self.sigma_c
    }

    /// Number of explicit Euler steps on the forward grid.
    pub fn n_steps(&self) -> usize {
        ((self.horizon / self.dt).round() as usize).max(1)
    }

    /// Forward step actually used: the horizon split into `n_steps` equal pieces.
    pub fn step(&self) -> f64 {
        self.horizon / self.n_steps() as f64
    }

    /// Riccati node count aligned with the forward grid.
    pub fn aligned_nodes(&self) -> usize {
        self.n_steps() + 1
    }

    pub fn get(&self, field: ParamField) -> f64 {
        use ParamField::*;
        match field {
            Beta => self.beta,
            Eta => self.eta,
            Chi => self.chi,
            SigmaL => self.sigma_l,
            SigmaC => self.sigma_c,
            W1 => self.w1,
            W2Bar => self.w2_bar,
            Kappa => self.kappa,
            RU => self.r_u,
            R => self.r,
            GM => self.g_m,
            GV => self.g_v,
            LambdaM => self.lambda_m,
            LambdaV => self.lambda_v,
            UMin => self.u_min,
            UMax => self.u_max,
            PiMax => self.pi_max,
            Horizon => self.horizon,
            Dt => self.dt,
            M0 => self.m0,
            V0 => self.v0,
        }
    }

    pub fn set(&mut self, field: ParamField, value: f64) {
        use ParamField::*;
        let slot = match field {
            Beta => &mut self.beta,
            Eta => &mut self.eta,
            Chi => &mut self.chi,
            SigmaL => &mut self.sigma_l,
            SigmaC => &mut self.sigma_c,
            W1 => &mut self.w1,
            W2Bar => &mut self.w2_bar,
            Kappa => &mut self.kappa,
            RU => &mut self.r_u,
            R => &mut self.r,
            GM => &mut self.g_m,
            GV => &mut self.g_v,
            LambdaM => &mut self.lambda_m,
            LambdaV => &mut self.lambda_v,
            UMin => &mut self.u_min,
            UMax => &mut self.u_max,
            PiMax => &mut self.pi_max,
            Horizon => &mut self.horizon,
            Dt => &mut self.dt,
            M0 => &mut self.m0,
            V0 => &mut self.v0,
        };
        *slot = value;
    }

    /// Copy with one field replaced.
    pub fn with(mut self, field: ParamField, value: f64) -> Self {
        self.set(field, value);
        self
    }

    /// Apply a `name=value` override as accepted by the CLI.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (name, value) = assignment.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("expected name=value, got `{assignment}`"))
        })?;
        let field: ParamField = name.trim().parse()?;
        let value: f64 = value.trim().parse().map_err(|_| {
            Error::InvalidArgument(format!("`{}` is not a number", value.trim()))
        })?;
        self.set(field, value);
        Ok(())
    }

    pub fn validated(self) -> Result<Self> {
        let report = validate(&self);
        if report.is_ok() {
            Ok(self)
        } else {
            Err(Error::InvalidParams(report))
        }
    }
}

impl Default for ModelParams {
    fn default() -> Self {
        Self::baseline()
    }
}

/// Every field of [`ModelParams`], addressable by its configuration key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamField {
    Beta,
    Eta,
    Chi,
    SigmaL,
    SigmaC,
    W1,
    W2Bar,
    Kappa,
    RU,
    R,
    GM,
    GV,
    LambdaM,
    LambdaV,
    UMin,
    UMax,
    PiMax,
    Horizon,
    Dt,
    M0,
    V0,
}

impl ParamField {
    pub const ALL: [ParamField; 21] = [
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
        ParamField::GM,
        ParamField::GV,
        ParamField::LambdaM,
        ParamField::LambdaV,
        ParamField::UMin,
        ParamField::UMax,
        ParamField::PiMax,
        ParamField::Horizon,
        ParamField::Dt,
        ParamField::M0,
        ParamField::V0,
    ];

    pub const fn name(self) -> &'static str {
        use ParamField::*;
        match self {
            Beta => "beta",
            Eta => "eta",
            Chi => "chi",
            SigmaL => "sigma_L",
            SigmaC => "sigma_c",
            W1 => "w1",
            W2Bar => "w2_bar",
            Kappa => "kappa",
            RU => "R_u",
            R => "R",
            GM => "G_m",
            GV => "G_v",
            LambdaM => "lambda_m",
            LambdaV => "lambda_v",
            UMin => "u_min",
            UMax => "u_max",
            PiMax => "pi_max",
            Horizon => "T",
            Dt => "dt",
            M0 => "m0",
            V0 => "v0",
        }
    }
}

impl fmt::Display for ParamField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamField::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::UnknownParameter(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: &'static str,
    pub condition: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.condition)
    }
}

/// Outcome of [`validate`]; an empty violation list means the parameters are usable.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn mentions(&self, field: &str) -> bool {
        self.violations.iter().any(|v| v.field == field)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "  - {v}")?;
        }
        Ok(())
    }
}

pub fn validate(p: &ModelParams) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |field: &'static str, condition: String| {
        violations.push(Violation { field, condition });
    };

    for field in ParamField::ALL {
        if !p.get(field).is_finite() {
            push(field.name(), format!("{} must be finite", field.name()));
        }
    }

    let positive = [
        (ParamField::Beta, p.beta),
        (ParamField::Eta, p.eta),
        (ParamField::Chi, p.chi),
        (ParamField::W1, p.w1),
        (ParamField::W2Bar, p.w2_bar),
        (ParamField::RU, p.r_u),
        (ParamField::R, p.r),
        (ParamField::PiMax, p.pi_max),
        (ParamField::Horizon, p.horizon),
        (ParamField::Dt, p.dt),
    ];
    for (field, value) in positive {
        if !(value > 0.0) && value.is_finite() {
            push(field.name(), format!("{} must be positive", field.name()));
        }
    }

    let non_negative = [
        (ParamField::SigmaL, p.sigma_l),
        (ParamField::SigmaC, p.sigma_c),
        (ParamField::Kappa, p.kappa),
        (ParamField::GM, p.g_m),
        (ParamField::GV, p.g_v),
        (ParamField::LambdaM, p.lambda_m),
        (ParamField::LambdaV, p.lambda_v),
        (ParamField::V0, p.v0),
    ];
    for (field, value) in non_negative {
        if value < 0.0 {
            push(field.name(), format!("{} must be non-negative", field.name()));
        }
    }

    if !(p.u_min < p.u_max) {
        push("u_min", "u_min must be below u_max".to_string());
    }
    if p.dt > 0.0 && !(p.dt < p.horizon) {
        push("dt", "dt must be smaller than the horizon T".to_string());
    }
    if !(p.w2_bar + p.kappa * p.u_min > 0.0) {
        push(
            "w2_bar",
            format!(
                "variance weight not uniformly positive: w2_bar + kappa*u_min = {}",
                p.w2_bar + p.kappa * p.u_min
            ),
        );
    }

    ValidationReport { violations }
}

/// Net stabilizing margins of the mean and variance channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityReport {
    /// η²/R_u − 4λ_m
    pub margin_m: f64,
    /// χ²/R − 4λ_v
    pub margin_v: f64,
    pub lambda_m_star: f64,
    pub lambda_v_star: f64,
    pub sigma_sq: f64,
    pub stable: bool,
}

pub fn stability_report(p: &ModelParams) -> StabilityReport {
    let gain_m = p.eta * p.eta / p.r_u;
    let gain_v = p.chi * p.chi / p.r;
    let margin_m = gain_m - 4.0 * p.lambda_m;
    let margin_v = gain_v - 4.0 * p.lambda_v;
    StabilityReport {
        margin_m,
        margin_v,
        lambda_m_star: gain_m / 4.0,
        lambda_v_star: gain_v / 4.0,
        sigma_sq: p.sigma_sq(),
        stable: margin_m > 0.0 && margin_v > 0.0,
    }
}
