//! Declarative experiment descriptions.
//!
//! A config is TOML with the sections `system`, `environment`, `numerics`,
//! `sweep`, `fmap` and `output`. Configs can be layered: a named preset
//! supplies the base and a file overrides individual keys. Unknown keys are
//! rejected with the closest known key as a suggestion.

use std::path::{Path, PathBuf};

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::coeff::{solve_f_ou_fast, CoefficientTable};
use crate::env::LorentzSpec;
use crate::error::{CradleError, Result};
use crate::fock::{recommended_cutoff, SystemSpec};

/// Longest horizon chosen automatically.
pub const MAX_AUTO_HORIZON: f64 = 3000.0;
/// Horizon of finite-coupling runs.
pub const FINITE_COUPLING_HORIZON: f64 = 30.0;
/// Largest step chosen automatically.
pub const MAX_AUTO_DT: f64 = 0.05;
/// Stability budget of the classical four-stage stepper used by the automatic step.
pub const STIFFNESS_BUDGET: f64 = 0.25;

/// A real number or the literal `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Auto {
    #[default]
    Auto,
    Value(f64),
}

impl Serialize for Auto {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Auto => s.serialize_str("auto"),
            Self::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Auto {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Self::Value(v)),
            Raw::Int(v) => Ok(Self::Value(v as f64)),
            Raw::Text(t) if t == "auto" => Ok(Self::Auto),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a number or \"auto\", got \"{t}\""
            ))),
        }
    }
}

/// One value for every cavity (or bond), or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerCavity {
    Uniform(f64),
    List(Vec<f64>),
}

impl PerCavity {
    fn expand(&self, n: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            Self::Uniform(v) => Ok(vec![*v; n]),
            Self::List(v) if v.len() == n => Ok(v.clone()),
            Self::List(v) => Err(CradleError::Config(format!(
                "{what} needs {n} entries, got {}",
                v.len()
            ))),
        }
    }
}

/// Complex amplitude as `2.0` or `[re, im]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Amplitude {
    Real(f64),
    Complex([f64; 2]),
}

impl Amplitude {
    pub fn value(&self) -> C64 {
        match *self {
            Self::Real(r) => C64::new(r, 0.0),
            Self::Complex([re, im]) => C64::new(re, im),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub modes: usize,
    #[serde(default = "one")]
    pub omega: PerCavity,
    /// Couplings between neighbours, one per bond.
    #[serde(default = "zero")]
    pub lambda: PerCavity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// Three cavities only: weights `(1, 1 - eta, 1 + eta)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: Amplitude,
    /// One-based.
    #[serde(default = "one_usize")]
    pub initial_cavity: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EnvironmentKind {
    #[default]
    Ou,
    Markovian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSection {
    #[serde(default)]
    pub kind: EnvironmentKind,
    #[serde(default = "one_f64")]
    pub gamma_big: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default)]
    pub delta: f64,
    /// Inverse temperature; only the coefficient command uses it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SolverChoice {
    #[default]
    Auto,
    Master,
    Ensemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<usize>,
    #[serde(default)]
    pub dt: Auto,
    #[serde(default)]
    pub t_max: Auto,
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "one_u64")]
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverChoice,
    /// Repeat master runs at `dt / 2` and compare the fidelity of `check_cavity`.
    #[serde(default = "yes")]
    pub halving_check: bool,
    #[serde(default = "default_halving_tol")]
    pub halving_tolerance: f64,
    /// One-based; defaults to cavity 2 (or 1 for a single cavity).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check_cavity: Option<usize>,
    #[serde(default = "default_thermal_cap")]
    pub thermal_step_cap: usize,
}

impl Default for NumericsSection {
    fn default() -> Self {
        Self {
            cutoff: None,
            dt: Auto::Auto,
            t_max: Auto::Auto,
            trajectories: default_trajectories(),
            blocks: default_blocks(),
            seed: 1,
            solver: SolverChoice::Auto,
            halving_check: true,
            halving_tolerance: default_halving_tol(),
            check_cavity: None,
            thermal_step_cap: default_thermal_cap(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Gamma,
    Tau,
    Delta,
    GammaBig,
    Eta,
    Lambda1,
    Lambda2,
    Alpha,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gamma => "gamma",
            Self::Tau => "tau",
            Self::Delta => "delta",
            Self::GammaBig => "gamma_big",
            Self::Eta => "eta",
            Self::Lambda1 => "lambda1",
            Self::Lambda2 => "lambda2",
            Self::Alpha => "alpha",
        }
    }
}

/// Evenly spaced values including both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeSpec {
    pub start: f64,
    pub stop: f64,
    pub points: usize,
}

impl RangeSpec {
    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.start];
        }
        let h = (self.stop - self.start) / (self.points - 1) as f64;
        (0..self.points)
            .map(|k| self.start + h * k as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: SweepParameter,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<RangeSpec>,
}

impl SweepSection {
    pub fn points(&self) -> Result<Vec<f64>> {
        let v = match (&self.values, &self.range) {
            (Some(v), None) => v.clone(),
            (None, Some(r)) => {
                if r.points == 0 {
                    return Err(CradleError::Config(
                        "sweep.range.points must be >= 1".into(),
                    ));
                }
                r.values()
            }
            _ => {
                return Err(CradleError::Config(
                    "sweep needs exactly one of `values` or `range`".into(),
                ))
            }
        };
        if v.is_empty() {
            return Err(CradleError::Config("sweep has no points".into()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(CradleError::Config("sweep values must be finite".into()));
        }
        Ok(v)
    }
}

/// Grid of long-time coefficient summaries over the central frequency and memory time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmapSection {
    pub delta: RangeSpec,
    pub tau: RangeSpec,
    /// Tail fraction of each table that is averaged.
    #[serde(default = "default_window")]
    pub window: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub directory: PathBuf,
    #[serde(default = "default_probe")]
    pub probe_interval: f64,
    /// Times (nearest probe) at which Wigner grids are written.
    #[serde(default)]
    pub wigner_times: Vec<f64>,
    /// One-based cavities for the Wigner grids; empty means every cavity.
    #[serde(default)]
    pub wigner_cavities: Vec<usize>,
    #[serde(default = "default_wigner_points")]
    pub wigner_points: usize,
    /// Times (nearest probe) at which the full density matrix is dumped.
    #[serde(default)]
    pub rho_times: Vec<f64>,
    /// Also write the coefficient table used by `run`.
    #[serde(default)]
    pub coefficients: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: default_dir(),
            probe_interval: default_probe(),
            wigner_times: Vec::new(),
            wigner_cavities: Vec::new(),
            wigner_points: default_wigner_points(),
            rho_times: Vec::new(),
            coefficients: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Free-text note carried into manifests, used by presets to flag reconstructed grids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub system: SystemSection,
    #[serde(default)]
    pub environment: EnvironmentSection,
    #[serde(default)]
    pub numerics: NumericsSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fmap: Option<FmapSection>,
    #[serde(default)]
    pub output: OutputSection,
}

impl Default for EnvironmentSection {
    fn default() -> Self {
        Self {
            kind: EnvironmentKind::Ou,
            gamma_big: 1.0,
            gamma: None,
            tau: None,
            delta: 0.0,
            beta: None,
        }
    }
}

fn one() -> PerCavity {
    PerCavity::Uniform(1.0)
}
fn zero() -> PerCavity {
    PerCavity::Uniform(0.0)
}
fn default_alpha() -> Amplitude {
    Amplitude::Real(2.0)
}
fn one_usize() -> usize {
    1
}
fn one_u64() -> u64 {
    1
}
fn one_f64() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_trajectories() -> usize {
    1000
}
fn default_blocks() -> usize {
    crate::dynamics::DEFAULT_BLOCKS
}
fn default_halving_tol() -> f64 {
    crate::dynamics::HALVING_TOL
}
fn default_thermal_cap() -> usize {
    crate::coeff::DEFAULT_THERMAL_STEP_CAP
}
fn default_window() -> f64 {
    0.2
}
fn default_dir() -> PathBuf {
    PathBuf::from("cradle-out")
}
fn default_probe() -> f64 {
    0.5
}
fn default_wigner_points() -> usize {
    crate::observables::DEFAULT_WIGNER_POINTS
}

const TOP_KEYS: &[&str] = &[
    "name",
    "note",
    "system",
    "environment",
    "numerics",
    "sweep",
    "fmap",
    "output",
];
const SECTION_KEYS: &[(&str, &[&str])] = &[
    (
        "system",
        &[
            "modes",
            "omega",
            "lambda",
            "weights",
            "eta",
            "alpha",
            "initial_cavity",
        ],
    ),
    (
        "environment",
        &["kind", "gamma_big", "gamma", "tau", "delta", "beta"],
    ),
    (
        "numerics",
        &[
            "cutoff",
            "dt",
            "t_max",
            "trajectories",
            "blocks",
            "seed",
            "solver",
            "halving_check",
            "halving_tolerance",
            "check_cavity",
            "thermal_step_cap",
        ],
    ),
    ("sweep", &["parameter", "values", "range"]),
    ("fmap", &["delta", "tau", "window"]),
    (
        "output",
        &[
            "directory",
            "probe_interval",
            "wigner_times",
            "wigner_cavities",
            "wigner_points",
            "rho_times",
            "coefficients",
        ],
    ),
];
const RANGE_KEYS: &[&str] = &["start", "stop", "points"];

fn suggest(key: &str, known: &[&str]) -> String {
    let best = known
        .iter()
        .map(|k| (strsim::jaro_winkler(key, k), *k))
        .max_by(|a, b| a.0.total_cmp(&b.0));
    match best {
        Some((score, k)) if score > 0.75 => format!("; did you mean `{k}`?"),
        _ => format!("; known keys: {}", known.join(", ")),
    }
}

fn check_table(table: &toml::Table, path: &str, known: &[&str]) -> Result<()> {
    for key in table.keys() {
        if !known.contains(&key.as_str()) {
            let place = if path.is_empty() {
                key.clone()
            } else {
                format!("{path}.{key}")
            };
            return Err(CradleError::Config(format!(
                "unknown key `{place}`{}",
                suggest(key, known)
            )));
        }
    }
    Ok(())
}

/// Rejects unknown keys anywhere in the document, naming the closest known key.
fn check_keys(doc: &toml::Table) -> Result<()> {
    check_table(doc, "", TOP_KEYS)?;
    for (section, keys) in SECTION_KEYS {
        let Some(value) = doc.get(*section) else {
            continue;
        };
        let table = value
            .as_table()
            .ok_or_else(|| CradleError::Config(format!("`{section}` must be a table")))?;
        check_table(table, section, keys)?;
        for (key, inner) in table {
            if let Some(t) = inner.as_table() {
                if matches!(
                    (*section, key.as_str()),
                    ("sweep", "range") | ("fmap", "delta") | ("fmap", "tau")
                ) {
                    check_table(t, &format!("{section}.{key}"), RANGE_KEYS)?;
                }
            }
        }
    }
    Ok(())
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| CradleError::Config(format!("{origin}: {}", e.message())))
}

/// Environment resolved to a kernel family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Environment {
    Ou(LorentzSpec),
    Markovian { gamma_big: f64 },
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_layers(&[(text, "config")])
    }

    /// Layers TOML documents in order, later ones overriding earlier ones.
    pub fn from_layers(layers: &[(&str, &str)]) -> Result<Self> {
        let mut doc = toml::Table::new();
        for (text, origin) in layers {
            let t = parse_table(text, origin)?;
            check_keys(&t).map_err(|e| match e {
                CradleError::Config(m) => CradleError::Config(format!("{origin}: {m}")),
                other => other,
            })?;
            merge(&mut doc, t);
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| CradleError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config, or the resolved config stored in a run manifest (`.json`),
    /// optionally layered over a preset.
    pub fn load(path: Option<&Path>, preset: Option<&str>) -> Result<Self> {
        let mut layers: Vec<(String, String)> = Vec::new();
        if let Some(name) = preset {
            let text = crate::experiment::preset_toml(name)?;
            layers.push((text.to_string(), format!("preset {name}")));
        }
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CradleError::Config(format!("cannot read {}: {e}", path.display())))?;
            let text = if path.extension().is_some_and(|e| e == "json") {
                crate::experiment::config_from_manifest(&text)?
            } else {
                text
            };
            layers.push((text, path.display().to_string()));
        }
        if layers.is_empty() {
            return Err(CradleError::Config(
                "no config given: pass a config file or a preset".into(),
            ));
        }
        let refs: Vec<(&str, &str)> = layers
            .iter()
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect();
        Self::from_layers(&refs)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CradleError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let sys = &self.system;
        let n = sys.modes;
        let bad = |m: String| Err(CradleError::Config(m));
        if n == 0 {
            return bad("system.modes must be >= 1".into());
        }
        sys.omega.expand(n, "system.omega")?;
        if n > 1 {
            sys.lambda.expand(n - 1, "system.lambda")?;
        }
        if sys.weights.is_some() && sys.eta.is_some() {
            return bad("system.weights and system.eta are mutually exclusive".into());
        }
        if sys.eta.is_some() && n != 3 {
            return bad("system.eta needs exactly three cavities".into());
        }
        if let Some(w) = &sys.weights {
            if w.len() != n {
                return bad(format!("system.weights needs {n} entries, got {}", w.len()));
            }
        }
        if sys.initial_cavity == 0 || sys.initial_cavity > n {
            return bad(format!("system.initial_cavity must be in 1..={n}"));
        }
        if sys.alpha.value().norm() == 0.0 {
            return bad("system.alpha must be nonzero".into());
        }
        let env = &self.environment;
        match env.kind {
            EnvironmentKind::Ou => {
                if env.gamma.is_some() == env.tau.is_some() {
                    return bad("give exactly one of environment.gamma and environment.tau".into());
                }
            }
            EnvironmentKind::Markovian => {
                if env.gamma.is_some() || env.tau.is_some() || env.beta.is_some() {
                    return bad("a markovian environment takes only gamma_big".into());
                }
            }
        }
        if let Some(b) = env.beta {
            if !(b > 0.0) {
                return bad("environment.beta must be > 0".into());
            }
        }
        let num = &self.numerics;
        if let Auto::Value(dt) = num.dt {
            if !(dt > 0.0) {
                return bad("numerics.dt must be > 0".into());
            }
        }
        if let Auto::Value(t) = num.t_max {
            if !(t > 0.0) {
                return bad("numerics.t_max must be > 0".into());
            }
        }
        if let Some(c) = num.cutoff {
            if c < 2 {
                return bad("numerics.cutoff must be >= 2".into());
            }
        }
        if num.trajectories < 2 {
            return bad("numerics.trajectories must be >= 2".into());
        }
        if num.blocks < 2 {
            return bad("numerics.blocks must be >= 2".into());
        }
        if let Some(c) = num.check_cavity {
            if c == 0 || c > n {
                return bad(format!("numerics.check_cavity must be in 1..={n}"));
            }
        }
        if !(self.output.probe_interval > 0.0) {
            return bad("output.probe_interval must be > 0".into());
        }
        if self.output.wigner_points < 3 {
            return bad("output.wigner_points must be >= 3".into());
        }
        if let Some(&c) = self
            .output
            .wigner_cavities
            .iter()
            .find(|&&c| c == 0 || c > n)
        {
            return bad(format!(
                "output.wigner_cavities entry {c} is not in 1..={n}"
            ));
        }
        if let Some(sweep) = &self.sweep {
            let values = sweep.points()?;
            let needs = |ok: bool, what: &str| {
                if ok {
                    Ok(())
                } else {
                    bad(format!("sweep over {} {what}", sweep.parameter.name()))
                }
            };
            match sweep.parameter {
                SweepParameter::Eta => needs(n == 3, "needs three cavities")?,
                SweepParameter::Lambda1 => needs(n >= 2, "needs two cavities")?,
                SweepParameter::Lambda2 => needs(n >= 3, "needs three cavities")?,
                SweepParameter::Gamma | SweepParameter::Tau | SweepParameter::Delta => {
                    needs(env.kind == EnvironmentKind::Ou, "needs an ou environment")?
                }
                SweepParameter::GammaBig | SweepParameter::Alpha => {}
            }
            for v in values {
                self.at_sweep_value(sweep.parameter, v)?;
            }
        }
        if let Some(f) = &self.fmap {
            if f.delta.points == 0 || f.tau.points == 0 {
                return bad("fmap ranges need at least one point".into());
            }
            if f.tau.values().iter().any(|t| !(*t > 0.0)) {
                return bad("fmap.tau values must be > 0".into());
            }
            if !(f.window > 0.0 && f.window <= 1.0) {
                return bad("fmap.window must be in (0, 1]".into());
            }
        }
        self.system_spec()?;
        self.environment()?;
        Ok(())
    }

    /// The config of one sweep point, without the sweep block.
    pub fn at_sweep_value(&self, parameter: SweepParameter, value: f64) -> Result<Self> {
        let mut c = self.clone();
        c.sweep = None;
        match parameter {
            SweepParameter::Gamma => {
                c.environment.gamma = Some(value);
                c.environment.tau = None;
            }
            SweepParameter::Tau => {
                c.environment.tau = Some(value);
                c.environment.gamma = None;
            }
            SweepParameter::Delta => c.environment.delta = value,
            SweepParameter::GammaBig => c.environment.gamma_big = value,
            SweepParameter::Eta => {
                c.system.eta = Some(value);
                c.system.weights = None;
            }
            SweepParameter::Lambda1 | SweepParameter::Lambda2 => {
                let n = c.system.modes;
                let mut bonds = c
                    .system
                    .lambda
                    .expand(n.saturating_sub(1), "system.lambda")?;
                let k = if parameter == SweepParameter::Lambda1 {
                    0
                } else {
                    1
                };
                bonds[k] = value;
                c.system.lambda = PerCavity::List(bonds);
            }
            SweepParameter::Alpha => c.system.alpha = Amplitude::Real(value),
        }
        c.system_spec()?;
        c.environment()?;
        Ok(c)
    }

    pub fn system_spec(&self) -> Result<SystemSpec> {
        let sys = &self.system;
        let n = sys.modes;
        let omegas = sys.omega.expand(n, "system.omega")?;
        let mut lambdas = if n > 1 {
            sys.lambda.expand(n - 1, "system.lambda")?
        } else {
            Vec::new()
        };
        lambdas.push(0.0);
        let weights = match (&sys.weights, sys.eta) {
            (Some(w), _) => w.clone(),
            (None, Some(eta)) => SystemSpec::weights_for_eta(eta),
            (None, None) => vec![1.0; n],
        };
        SystemSpec::new(omegas, lambdas, weights).map_err(|e| CradleError::Config(e.to_string()))
    }

    pub fn environment(&self) -> Result<Environment> {
        let env = &self.environment;
        let to_config = |e: CradleError| CradleError::Config(e.to_string());
        match env.kind {
            EnvironmentKind::Markovian => {
                if !(env.gamma_big >= 0.0) {
                    return Err(CradleError::Config(
                        "environment.gamma_big must be >= 0".into(),
                    ));
                }
                Ok(Environment::Markovian {
                    gamma_big: env.gamma_big,
                })
            }
            EnvironmentKind::Ou => {
                let l = match (env.gamma, env.tau) {
                    (Some(g), None) => LorentzSpec::new(env.gamma_big, g, env.delta),
                    (None, Some(t)) => LorentzSpec::from_tau(env.gamma_big, t, env.delta),
                    _ => {
                        return Err(CradleError::Config(
                            "give exactly one of environment.gamma and environment.tau".into(),
                        ))
                    }
                }
                .map_err(to_config)?;
                Ok(Environment::Ou(l))
            }
        }
    }

    pub fn alpha(&self) -> C64 {
        self.system.alpha.value()
    }

    pub fn cutoff(&self) -> usize {
        self.numerics
            .cutoff
            .unwrap_or_else(|| recommended_cutoff(self.alpha().norm()))
    }

    /// Zero-based cavity of the halving check.
    pub fn check_cavity(&self) -> usize {
        match self.numerics.check_cavity {
            Some(c) => c - 1,
            None => usize::from(self.system.modes > 1),
        }
    }

    /// Master for up to two cavities, ensemble beyond.
    pub fn solver(&self) -> SolverChoice {
        match self.numerics.solver {
            SolverChoice::Auto if self.system.modes <= 2 => SolverChoice::Master,
            SolverChoice::Auto => SolverChoice::Ensemble,
            s => s,
        }
    }

    pub fn output_dir(&self) -> &Path {
        &self.output.directory
    }
}

/// Step, horizon and coefficient estimate of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub dt: f64,
    pub t_max: f64,
    pub probe_interval: f64,
    pub cutoff: usize,
    /// Largest `|F_i(t)|` of the estimate table.
    pub max_coefficient: f64,
    /// `max_i |Im F_i|` at the end of the estimate table.
    pub im_f_infinity: f64,
    pub dt_auto: bool,
    pub t_max_auto: bool,
}

/// Horizon of the coefficient estimate used by the automatic choices.
fn estimate_horizon(env: &Environment) -> f64 {
    match env {
        Environment::Ou(l) => (40.0 * l.tau()).clamp(200.0, MAX_AUTO_HORIZON),
        Environment::Markovian { .. } => 1.0,
    }
}

/// Coefficient estimate on a coarse grid.
pub fn coefficient_estimate(
    spec: &SystemSpec,
    env: &Environment,
    t_max: f64,
) -> Result<CoefficientTable> {
    match env {
        Environment::Ou(l) => {
            let rate = l
                .rate()
                .norm()
                .max(spec.omegas.iter().fold(0.0_f64, |a, b| a.max(b.abs())));
            let dt = (0.2 / rate.max(1.0)).min(0.05);
            let steps = (t_max / dt).ceil().max(1.0);
            solve_f_ou_fast(spec, l, t_max / steps, t_max)
        }
        Environment::Markovian { gamma_big } => {
            crate::coeff::markov_coefficients(spec, *gamma_big, t_max, t_max)
        }
    }
}

impl ExperimentConfig {
    /// Fills in the automatic step and horizon.
    ///
    /// The horizon is `max(300, 3 pi / (4 |Im F_inf|))` for uncoupled arrays
    /// (capped at [`MAX_AUTO_HORIZON`]) and [`FINITE_COUPLING_HORIZON`] otherwise.
    /// The step keeps `dt * 2 max|F| (N_c - 1) sum l^2` within [`STIFFNESS_BUDGET`],
    /// is at most [`MAX_AUTO_DT`] and divides the probe interval.
    pub fn resolve(&self) -> Result<Resolved> {
        let spec = self.system_spec()?;
        let env = self.environment()?;
        let est = coefficient_estimate(&spec, &env, estimate_horizon(&env))?;
        let last = est.at_step(est.steps());
        let im_f_infinity = last.iter().map(|f| f.im.abs()).fold(0.0, f64::max);
        let max_coefficient = (0..=est.steps())
            .flat_map(|n| est.at_step(n).iter().map(|f| f.norm()).collect::<Vec<_>>())
            .fold(0.0, f64::max);
        let uncoupled = spec.lambdas.iter().all(|l| *l == 0.0);
        let t_max = match self.numerics.t_max {
            Auto::Value(t) => t,
            Auto::Auto if uncoupled => {
                let t = if im_f_infinity > 0.0 {
                    3.0 * std::f64::consts::PI / (4.0 * im_f_infinity)
                } else {
                    f64::INFINITY
                };
                t.max(300.0).min(MAX_AUTO_HORIZON)
            }
            Auto::Auto => FINITE_COUPLING_HORIZON,
        };
        let probe = self.output.probe_interval;
        let cutoff = self.cutoff();
        let dt = match self.numerics.dt {
            Auto::Value(dt) => dt,
            Auto::Auto => {
                let sum_l2: f64 = spec.weights.iter().map(|l| l * l).sum();
                let stiff = 2.0 * max_coefficient * (cutoff as f64 - 1.0) * sum_l2;
                let raw = if stiff > 0.0 {
                    STIFFNESS_BUDGET / stiff
                } else {
                    MAX_AUTO_DT
                };
                let raw = raw.min(MAX_AUTO_DT).min(probe);
                probe / (probe / raw).ceil()
            }
        };
        // snap the horizon onto the step grid
        let steps = (t_max / dt).round().max(1.0);
        let t_max = if (steps * dt - t_max).abs() <= 1e-9 * t_max {
            t_max
        } else {
            (t_max / dt).ceil() * dt
        };
        Ok(Resolved {
            dt,
            t_max,
            probe_interval: probe,
            cutoff,
            max_coefficient,
            im_f_infinity,
            dt_auto: self.numerics.dt == Auto::Auto,
            t_max_auto: self.numerics.t_max == Auto::Auto,
        })
    }
}
