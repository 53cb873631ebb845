//! Experiment commands: single runs, sweeps, coefficient maps and static
//! validation, each producing schema-tagged files and a [`RunManifest`].

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coeff::{
    effective_coupling_ratio, format_float, markov_coefficients, solve_f_ou_fast,
    solve_thermal_coeffs, thermal_memory_bytes, CoefficientTable,
};
use crate::config::{Environment, ExperimentConfig, Resolved, SolverChoice, STIFFNESS_BUDGET};
use crate::dynamics::{
    projector, run_ensemble, run_master, run_master_checked, write_probe_csv, write_rho_dump,
    ConvergenceCheck, EnsembleSettings, MonitorSummary, NoiseSource, ProbeExtras, Propagator,
    Schedule, BATCH_WIDTH,
};
use crate::env::{thermal_kernels, LorentzSpec, QuadConfig};
use crate::error::{CradleError, Result};
use crate::fock::{
    poisson_tail, recommended_cutoff, DensOp, ExcitationSector, FockSpace, SystemSpec,
    MAX_TAIL_MASS,
};
use crate::observables::{default_wigner_grid, negativity_volume, FidelityCurve};
use crate::table::CsvTable;

pub const MANIFEST_SCHEMA: &str = "cradle-manifest v1";
pub const SWEEP_SCHEMA: &str = "# schema: cradle-sweep v1";
pub const SUMMARY_SCHEMA: &str = "# schema: cradle-sweep-summary v1";
pub const COUPLING_SCHEMA: &str = "# schema: cradle-coupling v1";
pub const FMAP_SCHEMA: &str = "# schema: cradle-fmap v1";
pub const CONVERGENCE_SCHEMA: &str = "# schema: cradle-convergence v1";
/// Memory above which `validate` recommends another solver.
pub const MEMORY_FLAG_BYTES: u64 = 1 << 30;
/// Dense `d x d` buffers alive during a master step.
pub const MASTER_BUFFERS: u64 = 6;
/// Kets alive per trajectory during a step.
pub const TRAJECTORY_BUFFERS: u64 = 6;

/// `(name, alias, text)`.
const PRESETS: &[(&str, &str, &str)] = &[
    ("tau-sweep", "fig2a", include_str!("presets/tau-sweep.toml")),
    (
        "delta-sweep",
        "fig3a",
        include_str!("presets/delta-sweep.toml"),
    ),
    ("fmap", "fig4", include_str!("presets/fmap.toml")),
    ("eta-sweep", "fig5", include_str!("presets/eta-sweep.toml")),
    ("revival", "fig6a", include_str!("presets/revival.toml")),
    (
        "lambda-sweep",
        "fig7",
        include_str!("presets/lambda-sweep.toml"),
    ),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.0).collect()
}

/// TOML text of a preset, by name or alias.
pub fn preset_toml(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, alias, _)| *n == name || *alias == name)
        .map(|p| p.2)
        .ok_or_else(|| {
            let names: Vec<String> = PRESETS
                .iter()
                .map(|(n, a, _)| format!("{n} ({a})"))
                .collect();
            CradleError::Config(format!(
                "unknown preset `{name}`; available: {}",
                names.join(", ")
            ))
        })
}

/// Settings that come from the command line rather than the config.
#[derive(Debug, Clone, Default)]
pub struct CommandOptions {
    pub preset: Option<String>,
    /// Recorded in the manifest; the caller sizes the rayon pool.
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the output directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub cavity: usize,
    pub sup_diff: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Largest trace distance between the reduced states of cavities 2 and 3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairDistance {
    pub max_distance: f64,
    pub t: f64,
    /// Statistical tolerance at that probe: three jackknife errors (zero for master runs).
    pub tolerance: f64,
    /// Distance within tolerance at every probe.
    pub identical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_value: Option<f64>,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverChoice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved: Option<ResolvedRecord>,
    /// `(max F_i, t)` per cavity.
    #[serde(default)]
    pub max_fidelity: Vec<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monitors: Option<MonitorRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_distance: Option<PairDistance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRecord {
    pub dt: f64,
    pub t_max: f64,
    pub probe_interval: f64,
    pub cutoff: usize,
    pub sector_dim: usize,
    pub im_f_infinity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorRecord {
    pub max_trace_drift: f64,
    pub max_hermiticity: f64,
    pub min_eigenvalue: f64,
    pub max_top_occupancy: f64,
    pub purity_min: f64,
    pub purity_max: f64,
}

impl From<MonitorSummary> for MonitorRecord {
    fn from(s: MonitorSummary) -> Self {
        Self {
            max_trace_drift: s.max_trace_drift,
            max_hermiticity: s.max_hermiticity,
            min_eigenvalue: s.min_eigenvalue,
            max_top_occupancy: s.max_top_occupancy,
            purity_min: s.purity_range.0,
            purity_max: s.purity_range.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub command: String,
    pub software: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// The config as TOML, with command-line overrides applied.
    pub config: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub wall_time_s: f64,
    pub runs: Vec<RunRecord>,
    pub files: Vec<FileRecord>,
}

impl RunManifest {
    fn new(command: &str, cfg: &ExperimentConfig, opts: &CommandOptions) -> Result<Self> {
        Ok(Self {
            schema: MANIFEST_SCHEMA.into(),
            command: command.into(),
            software: format!("cradle-core {}", env!("CARGO_PKG_VERSION")),
            preset: opts.preset.clone(),
            note: cfg.note.clone(),
            config: cfg.to_toml_string()?,
            workers: opts.workers,
            wall_time_s: 0.0,
            runs: Vec::new(),
            files: Vec::new(),
        })
    }

    pub fn failed_runs(&self) -> usize {
        self.runs.iter().filter(|r| r.status != "ok").count()
    }

    pub fn read(path: &Path) -> Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| CradleError::Format(e.to_string()))
    }

    fn record(&mut self, dir: &Path, file: &Path) -> Result<()> {
        let bytes = std::fs::read(file)?;
        let rel = file.strip_prefix(dir).unwrap_or(file);
        self.files.push(FileRecord {
            path: rel.to_string_lossy().replace('\\', "/"),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    /// Writes `manifest.json` into `dir`.
    fn finish(mut self, dir: &Path, started: Instant) -> Result<Self> {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        self.wall_time_s = started.elapsed().as_secs_f64();
        let text =
            serde_json::to_string_pretty(&self).map_err(|e| CradleError::Format(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), text)?;
        Ok(self)
    }
}

/// The config stored in a manifest, for replays.
pub fn config_from_manifest(json: &str) -> Result<String> {
    let m: RunManifest = serde_json::from_str(json)
        .map_err(|e| CradleError::Config(format!("not a run manifest: {e}")))?;
    Ok(m.config)
}

/// Result of one simulation before anything is written.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub solver: SolverChoice,
    pub resolved: Resolved,
    pub sector_dim: usize,
    pub times: Vec<f64>,
    pub fidelity: FidelityCurve,
    pub fidelity_error: Option<Vec<Vec<f64>>>,
    /// Reduced states per probe and cavity.
    pub reduced: Vec<Vec<DensOp>>,
    /// Laboratory-frame sector states at the requested dump times.
    pub full: Vec<(f64, DMatrix<C64>)>,
    pub monitors: Option<Vec<crate::dynamics::Monitor>>,
    pub trace: Option<(Vec<f64>, Vec<f64>)>,
    pub convergence: Option<ConvergenceCheck>,
    pub pair_distance: Option<PairDistance>,
    pub propagator: Propagator,
}

impl Simulation {
    fn max_fidelity(&self) -> Vec<(f64, f64)> {
        (0..self.fidelity.num_modes())
            .map(|i| self.fidelity.max_of(i))
            .collect()
    }

    fn record(&self, label: String, sweep_value: Option<f64>) -> RunRecord {
        let converged = self.convergence.as_ref().map_or(true, |c| c.passed);
        RunRecord {
            label,
            sweep_value,
            status: if converged { "ok" } else { "unconverged" }.into(),
            error: self.convergence.as_ref().filter(|c| !c.passed).map(|c| {
                format!(
                    "dt-halving check: sup-norm change {:.3e} >= {:.1e}",
                    c.sup_diff, c.tolerance
                )
            }),
            solver: Some(self.solver),
            resolved: Some(ResolvedRecord {
                dt: self.resolved.dt,
                t_max: self.resolved.t_max,
                probe_interval: self.resolved.probe_interval,
                cutoff: self.resolved.cutoff,
                sector_dim: self.sector_dim,
                im_f_infinity: self.resolved.im_f_infinity,
            }),
            max_fidelity: self.max_fidelity(),
            convergence: self.convergence.as_ref().map(|c| ConvergenceRecord {
                cavity: c.cavity + 1,
                sup_diff: c.sup_diff,
                tolerance: c.tolerance,
                passed: c.passed,
            }),
            monitors: self.monitors.as_ref().map(|m| MonitorSummary::of(m).into()),
            pair_distance: self.pair_distance,
        }
    }

    fn probe_extras(&self) -> ProbeExtras<'_> {
        ProbeExtras {
            fidelity_error: self.fidelity_error.as_deref(),
            monitors: self.monitors.as_deref(),
            trace: self
                .trace
                .as_ref()
                .map(|(a, b)| (a.as_slice(), b.as_slice())),
        }
    }
}

/// Coefficient table on a grid of spacing `dt / 2`, as the steppers need.
pub fn stage_table(
    spec: &SystemSpec,
    env: &Environment,
    dt: f64,
    t_max: f64,
) -> Result<CoefficientTable> {
    match env {
        Environment::Ou(l) => solve_f_ou_fast(spec, l, 0.5 * dt, t_max),
        Environment::Markovian { gamma_big } => {
            markov_coefficients(spec, *gamma_big, 0.5 * dt, t_max)
        }
    }
}

/// Runs the simulation described by a config without a sweep block.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Simulation> {
    let spec = cfg.system_spec()?;
    let env = cfg.environment()?;
    let resolved = cfg.resolve()?;
    let solver = cfg.solver();
    let (dt, t_max) = (resolved.dt, resolved.t_max);
    let alpha = cfg.alpha();
    let prop = Propagator::new(&spec, resolved.cutoff)?;
    let psi0 = prop.cat_initial(alpha, cfg.system.initial_cavity - 1)?;
    let schedule = Schedule::new(dt, t_max, resolved.probe_interval)
        .with_full_states(cfg.output.rho_times.clone());
    let pair = |reduced: &[Vec<DensOp>], times: &[f64]| -> Result<Option<PairDistance>> {
        if spec.num_modes() < 3 {
            return Ok(None);
        }
        let mut best = PairDistance {
            max_distance: 0.0,
            t: 0.0,
            tolerance: 0.0,
            identical: true,
        };
        for (r, t) in reduced.iter().zip(times) {
            let d = r[1].trace_distance(&r[2])?;
            if d > best.max_distance {
                best.max_distance = d;
                best.t = *t;
            }
        }
        best.identical = best.max_distance <= 1e-10;
        Ok(Some(best))
    };
    match solver {
        SolverChoice::Master | SolverChoice::Auto => {
            let rho0 = projector(&psi0);
            let run = if cfg.numerics.halving_check {
                let make = |h: f64| stage_table(&spec, &env, h, t_max);
                run_master_checked(
                    &prop,
                    &rho0,
                    &make,
                    &schedule,
                    alpha,
                    cfg.check_cavity(),
                    cfg.numerics.halving_tolerance,
                )?
            } else {
                run_master(
                    &prop,
                    &rho0,
                    &stage_table(&spec, &env, dt, t_max)?,
                    &schedule,
                    alpha,
                )?
            };
            let pair_distance = pair(&run.reduced, &run.times)?;
            Ok(Simulation {
                solver: SolverChoice::Master,
                resolved,
                sector_dim: prop.dim(),
                times: run.times,
                fidelity: run.fidelity,
                fidelity_error: None,
                reduced: run.reduced,
                full: run.full,
                monitors: Some(run.monitors),
                trace: None,
                convergence: run.convergence,
                pair_distance,
                propagator: prop,
            })
        }
        SolverChoice::Ensemble => {
            let noise = match env {
                Environment::Ou(l) => NoiseSource::Ou(l),
                Environment::Markovian { .. } => return Err(CradleError::Config(
                    "the ensemble path needs a colored (ou) environment; use solver = \"master\""
                        .into(),
                )),
            };
            let settings = EnsembleSettings {
                trajectories: cfg.numerics.trajectories,
                blocks: cfg.numerics.blocks,
                seed: cfg.numerics.seed,
            };
            let table = stage_table(&spec, &env, dt, t_max)?;
            let ens = run_ensemble(&prop, &psi0, &table, &noise, &schedule, &settings, alpha)?;
            let pair_distance = if spec.num_modes() >= 3 {
                let mut best = PairDistance {
                    max_distance: 0.0,
                    t: 0.0,
                    tolerance: 0.0,
                    identical: true,
                };
                for (p, t) in ens.times.iter().enumerate() {
                    let (d, err) =
                        ens.jackknife(p, |r| r[1].trace_distance(&r[2]).unwrap_or(f64::NAN))?;
                    let tol = 3.0 * err;
                    if !(d <= tol + 1e-10) {
                        best.identical = false;
                    }
                    if d > best.max_distance {
                        best.max_distance = d;
                        best.t = *t;
                        best.tolerance = tol;
                    }
                }
                Some(best)
            } else {
                None
            };
            Ok(Simulation {
                solver: SolverChoice::Ensemble,
                resolved,
                sector_dim: prop.dim(),
                times: ens.times.clone(),
                fidelity: ens.fidelity.clone(),
                fidelity_error: Some(ens.fidelity_error.clone()),
                reduced: ens.reduced.clone(),
                full: ens.full.clone(),
                monitors: None,
                trace: Some((ens.trace.clone(), ens.trace_error.clone())),
                convergence: None,
                pair_distance,
                propagator: prop,
            })
        }
    }
}

fn nearest_probe(times: &[f64], t: f64) -> usize {
    let mut best = 0;
    for (k, s) in times.iter().enumerate() {
        if (s - t).abs() < (times[best] - t).abs() {
            best = k;
        }
    }
    best
}

fn time_tag(t: f64) -> String {
    format_float(t).replace('-', "m")
}

/// Writes the probe CSV, Wigner grids, dumps and (if requested) the coefficient
/// table of one simulation into `dir` with the given file prefix.
fn write_simulation(
    sim: &Simulation,
    cfg: &ExperimentConfig,
    dir: &Path,
    prefix: &str,
    manifest: &mut RunManifest,
) -> Result<()> {
    let probe = dir.join(format!("{prefix}fidelity.csv"));
    write_probe_csv(&probe, &sim.fidelity, sim.probe_extras())?;
    manifest.record(dir, &probe)?;
    let cavities: Vec<usize> = if cfg.output.wigner_cavities.is_empty() {
        (0..cfg.system.modes).collect()
    } else {
        cfg.output.wigner_cavities.iter().map(|c| c - 1).collect()
    };
    for &t in &cfg.output.wigner_times {
        let k = nearest_probe(&sim.times, t);
        for &c in &cavities {
            let grid =
                default_wigner_grid(&sim.reduced[k][c], c, cfg.alpha(), cfg.output.wigner_points)?;
            let path = dir.join(format!(
                "{prefix}wigner_c{}_t{}.csv",
                c + 1,
                time_tag(sim.times[k])
            ));
            grid.write_csv(&path)?;
            log::info!(
                "cavity {} at t = {}: negativity volume {:.4e}",
                c + 1,
                sim.times[k],
                negativity_volume(&grid)
            );
            manifest.record(dir, &path)?;
        }
    }
    for (t, rho) in &sim.full {
        let path = dir.join(format!("{prefix}rho_t{}.bin", time_tag(*t)));
        let sidecar = write_rho_dump(&path, &sim.propagator, rho, *t)?;
        manifest.record(dir, &path)?;
        manifest.record(dir, &sidecar)?;
    }
    if let Some(c) = &sim.convergence {
        let path = dir.join(format!("{prefix}convergence.csv"));
        let mut table = CsvTable::new(
            CONVERGENCE_SCHEMA,
            vec![
                "t".into(),
                format!("F{}_dt", c.cavity + 1),
                format!("F{}_half_dt", c.cavity + 1),
            ],
        );
        for ((t, a), b) in c.times.iter().zip(&c.coarse).zip(&c.fine) {
            table.push(vec![format_float(*t), format_float(*a), format_float(*b)])?;
        }
        table.write(&path)?;
        manifest.record(dir, &path)?;
    }
    if cfg.output.coefficients {
        let spec = cfg.system_spec()?;
        let env = cfg.environment()?;
        let table = coefficient_table(&spec, &env, sim.resolved.dt, sim.resolved.t_max)?;
        let path = dir.join(format!("{prefix}coefficients.csv"));
        table.write_csv(&path)?;
        manifest.record(dir, &path)?;
    }
    Ok(())
}

fn coefficient_table(
    spec: &SystemSpec,
    env: &Environment,
    dt: f64,
    t_max: f64,
) -> Result<CoefficientTable> {
    match env {
        Environment::Ou(l) => solve_f_ou_fast(spec, l, dt, t_max),
        Environment::Markovian { gamma_big } => markov_coefficients(spec, *gamma_big, dt, t_max),
    }
}

fn prepare_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir().to_path_buf();
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// One simulation. A failed dt-halving check still writes every file and the
/// manifest, then returns [`CradleError::Convergence`].
pub fn cmd_run(cfg: &ExperimentConfig, opts: &CommandOptions) -> Result<RunManifest> {
    if cfg.sweep.is_some() {
        return Err(CradleError::Config(
            "config has a sweep block; use the sweep command".into(),
        ));
    }
    let started = Instant::now();
    let dir = prepare_dir(cfg)?;
    let mut manifest = RunManifest::new("run", cfg, opts)?;
    let sim = simulate(cfg)?;
    write_simulation(&sim, cfg, &dir, "", &mut manifest)?;
    manifest.runs.push(sim.record("run".into(), None));
    let manifest = manifest.finish(&dir, started)?;
    if let Some(c) = sim.convergence {
        c.into_result()?;
    }
    Ok(manifest)
}

/// Runs every sweep point concurrently. Failed points are recorded and the
/// sweep continues; check [`RunManifest::failed_runs`].
pub fn cmd_sweep(cfg: &ExperimentConfig, opts: &CommandOptions) -> Result<RunManifest> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CradleError::Config("config has no sweep block".into()))?;
    let started = Instant::now();
    let dir = prepare_dir(cfg)?;
    let mut manifest = RunManifest::new("sweep", cfg, opts)?;
    let values = sweep.points()?;
    let name = sweep.parameter.name();
    let outcomes: Vec<Result<Simulation>> = values
        .par_iter()
        .map(|&v| {
            let point = cfg.at_sweep_value(sweep.parameter, v)?;
            log::info!("sweep point {name} = {v}");
            simulate(&point)
        })
        .collect();

    let n = cfg.system.modes;
    let mut long_header = vec![name.to_string(), "t".into()];
    long_header.extend((1..=n).map(|i| format!("F{i}")));
    let mut long = CsvTable::new(SWEEP_SCHEMA, long_header);
    let mut summary_header = vec![
        name.to_string(),
        "status".into(),
        "solver".into(),
        "dt".into(),
        "t_max".into(),
    ];
    for i in 1..=n {
        summary_header.push(format!("max_F{i}"));
        summary_header.push(format!("t_F{i}"));
    }
    if n >= 3 {
        summary_header.extend([
            "d23_max".into(),
            "d23_tolerance".into(),
            "rho2_equals_rho3".into(),
        ]);
    }
    summary_header.push("error".into());
    let mut summary = CsvTable::new(SUMMARY_SCHEMA, summary_header);

    for (k, (v, outcome)) in values.iter().zip(outcomes).enumerate() {
        let label = format!("point{k:03}");
        match outcome {
            Ok(sim) => {
                let point = cfg.at_sweep_value(sweep.parameter, *v)?;
                write_simulation(&sim, &point, &dir, &format!("{label}_"), &mut manifest)?;
                for (p, t) in sim.times.iter().enumerate() {
                    let mut row = vec![format_float(*v), format_float(*t)];
                    row.extend(sim.fidelity.values.iter().map(|f| format_float(f[p])));
                    long.push(row)?;
                }
                let record = sim.record(label, Some(*v));
                let mut row = vec![
                    format_float(*v),
                    record.status.clone(),
                    solver_name(sim.solver).into(),
                    format_float(sim.resolved.dt),
                    format_float(sim.resolved.t_max),
                ];
                for (m, t) in &record.max_fidelity {
                    row.push(format_float(*m));
                    row.push(format_float(*t));
                }
                if n >= 3 {
                    let pd = sim.pair_distance.expect("three cavities");
                    row.push(format_float(pd.max_distance));
                    row.push(format_float(pd.tolerance));
                    row.push(pd.identical.to_string());
                }
                row.push(record.error.clone().unwrap_or_default());
                summary.push(row)?;
                manifest.runs.push(record);
            }
            Err(e) => {
                log::error!("sweep point {name} = {v} failed: {e}");
                let mut row = vec![
                    format_float(*v),
                    "failed".into(),
                    String::new(),
                    String::new(),
                    String::new(),
                ];
                row.extend(
                    std::iter::repeat(String::new()).take(2 * n + if n >= 3 { 3 } else { 0 }),
                );
                row.push(e.to_string());
                summary.push(row)?;
                manifest.runs.push(RunRecord {
                    label,
                    sweep_value: Some(*v),
                    status: "failed".into(),
                    error: Some(e.to_string()),
                    solver: None,
                    resolved: None,
                    max_fidelity: Vec::new(),
                    convergence: None,
                    monitors: None,
                    pair_distance: None,
                });
            }
        }
    }
    let long_path = dir.join("sweep.csv");
    long.write(&long_path)?;
    manifest.record(&dir, &long_path)?;
    let summary_path = dir.join("sweep_summary.csv");
    summary.write(&summary_path)?;
    manifest.record(&dir, &summary_path)?;
    manifest.finish(&dir, started)
}

fn solver_name(s: SolverChoice) -> &'static str {
    match s {
        SolverChoice::Auto => "auto",
        SolverChoice::Master => "master",
        SolverChoice::Ensemble => "ensemble",
    }
}

/// Horizon over which a map point is integrated before its tail is averaged.
fn fmap_horizon(l: &LorentzSpec) -> f64 {
    (40.0 * l.tau()).max(200.0)
}

/// One row of the long-time coefficient map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FmapPoint {
    pub delta: f64,
    pub tau: f64,
    pub cavity: usize,
    pub re: f64,
    pub im: f64,
    pub ratio: f64,
    pub dominance: f64,
    pub stationary: bool,
    /// The time-local coefficient diverged; the summary fields are NaN.
    pub singular: bool,
}

/// Long-time `F` summaries over the `fmap` grid of a config.
pub fn coefficient_map(cfg: &ExperimentConfig) -> Result<Vec<FmapPoint>> {
    let fmap = cfg
        .fmap
        .as_ref()
        .ok_or_else(|| CradleError::Config("config has no fmap block".into()))?;
    let spec = cfg.system_spec()?;
    let grid: Vec<(f64, f64)> = fmap
        .delta
        .values()
        .into_iter()
        .flat_map(|d| fmap.tau.values().into_iter().map(move |t| (d, t)))
        .collect();
    let rows: Vec<Result<Vec<FmapPoint>>> = grid
        .par_iter()
        .map(|&(delta, tau)| {
            let l = LorentzSpec::from_tau(cfg.environment.gamma_big, tau, delta)?;
            let horizon = fmap_horizon(&l);
            let dt = (0.2 / l.rate().norm().max(1.0)).min(0.05);
            let steps = (horizon / dt).ceil();
            let table = match solve_f_ou_fast(&spec, &l, horizon / steps, horizon) {
                Err(CradleError::BlowUp { step, .. }) => {
                    log::warn!(
                        "fmap point delta = {delta}, tau = {tau}: coefficient diverges at t = {}",
                        step as f64 * horizon / steps
                    );
                    return Ok((0..spec.num_modes())
                        .map(|i| FmapPoint {
                            delta,
                            tau,
                            cavity: i + 1,
                            re: f64::NAN,
                            im: f64::NAN,
                            ratio: f64::NAN,
                            dominance: f64::NAN,
                            stationary: false,
                            singular: true,
                        })
                        .collect());
                }
                other => other?,
            };
            Ok(effective_coupling_ratio(&table, fmap.window)?
                .into_iter()
                .enumerate()
                .map(|(i, s)| FmapPoint {
                    delta,
                    tau,
                    cavity: i + 1,
                    re: s.re,
                    im: s.im,
                    ratio: s.ratio,
                    dominance: s.dominance,
                    stationary: s.stationary,
                    singular: false,
                })
                .collect())
        })
        .collect();
    let mut out = Vec::new();
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

pub fn write_fmap(points: &[FmapPoint], path: &Path) -> Result<()> {
    let header = [
        "delta",
        "tau",
        "cavity",
        "re",
        "im",
        "ratio",
        "dominance",
        "stationary",
        "singular",
    ];
    let mut t = CsvTable::new(FMAP_SCHEMA, header.iter().map(|s| s.to_string()).collect());
    for p in points {
        t.push(vec![
            format_float(p.delta),
            format_float(p.tau),
            p.cavity.to_string(),
            format_float(p.re),
            format_float(p.im),
            format_float(p.ratio),
            format_float(p.dominance),
            p.stationary.to_string(),
            p.singular.to_string(),
        ])?;
    }
    t.write(path)
}

pub fn read_fmap(path: &Path) -> Result<Vec<FmapPoint>> {
    let t = CsvTable::read(path, FMAP_SCHEMA)?;
    let cols = ["delta", "tau", "cavity", "re", "im", "ratio", "dominance"]
        .iter()
        .map(|c| t.dense_column(c))
        .collect::<Result<Vec<_>>>()?;
    let k = t.column_index("stationary")?;
    let s = t.column_index("singular")?;
    Ok((0..t.rows.len())
        .map(|r| FmapPoint {
            delta: cols[0][r],
            tau: cols[1][r],
            cavity: cols[2][r] as usize,
            re: cols[3][r],
            im: cols[4][r],
            ratio: cols[5][r],
            dominance: cols[6][r],
            stationary: t.rows[r][k] == "true",
            singular: t.rows[r][s] == "true",
        })
        .collect())
}

/// Coefficient tables, long-time summaries and (with an `fmap` block) the
/// map over central frequency and memory time; no state is propagated.
pub fn cmd_coeffs(cfg: &ExperimentConfig, opts: &CommandOptions) -> Result<RunManifest> {
    let started = Instant::now();
    let dir = prepare_dir(cfg)?;
    let mut manifest = RunManifest::new("coeffs", cfg, opts)?;
    let spec = cfg.system_spec()?;
    let env = cfg.environment()?;
    let resolved = cfg.resolve()?;
    let table = coefficient_table(&spec, &env, resolved.dt, resolved.t_max)?;
    let path = dir.join("coefficients.csv");
    table.write_csv(&path)?;
    manifest.record(&dir, &path)?;

    let window = cfg.fmap.as_ref().map_or(0.2, |f| f.window);
    let mut coupling = CsvTable::new(
        COUPLING_SCHEMA,
        [
            "cavity",
            "re",
            "im",
            "ratio",
            "dominance",
            "drift",
            "stationary",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
    );
    for (i, s) in effective_coupling_ratio(&table, window)?.iter().enumerate() {
        coupling.push(vec![
            (i + 1).to_string(),
            format_float(s.re),
            format_float(s.im),
            format_float(s.ratio),
            format_float(s.dominance),
            format_float(s.drift),
            s.stationary.to_string(),
        ])?;
    }
    let path = dir.join("coupling.csv");
    coupling.write(&path)?;
    manifest.record(&dir, &path)?;

    if let (Some(beta), Environment::Ou(l)) = (cfg.environment.beta, env) {
        let steps = (resolved.t_max / resolved.dt).round() as usize;
        let kernels = thermal_kernels(&l, beta, resolved.dt, steps, &QuadConfig::default())?;
        let grids = solve_thermal_coeffs(
            &spec,
            &kernels,
            resolved.dt,
            resolved.t_max,
            cfg.numerics.thermal_step_cap,
        )?;
        let path = dir.join("coefficients_thermal.csv");
        grids.x_table()?.write_csv(&path)?;
        manifest.record(&dir, &path)?;
    }

    if cfg.fmap.is_some() {
        let points = coefficient_map(cfg)?;
        let path = dir.join("fmap.csv");
        write_fmap(&points, &path)?;
        manifest.record(&dir, &path)?;
    }
    manifest.runs.push(RunRecord {
        label: "coeffs".into(),
        sweep_value: None,
        status: "ok".into(),
        error: None,
        solver: None,
        resolved: Some(ResolvedRecord {
            dt: resolved.dt,
            t_max: resolved.t_max,
            probe_interval: resolved.probe_interval,
            cutoff: resolved.cutoff,
            sector_dim: 0,
            im_f_infinity: resolved.im_f_infinity,
        }),
        max_fidelity: Vec::new(),
        convergence: None,
        monitors: None,
        pair_distance: None,
    });
    manifest.finish(&dir, started)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Info,
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub level: Level,
    pub code: &'static str,
    pub message: String,
}

/// Memory of the chosen solver under the full-space cost model, with the
/// excitation-sector figure that the implementation actually needs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryEstimate {
    pub solver: SolverChoice,
    pub full_dim: u64,
    pub sector_dim: u64,
    pub full_bytes: u64,
    pub sector_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
    pub memory: Option<MemoryEstimate>,
    pub resolved: Option<Resolved>,
}

impl ValidationReport {
    /// No warnings or errors.
    pub fn is_clean(&self) -> bool {
        self.findings.iter().all(|f| f.level == Level::Info)
    }

    pub fn has(&self, code: &str) -> bool {
        self.findings
            .iter()
            .any(|f| f.code == code && f.level > Level::Info)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        if let Some(r) = &self.resolved {
            s.push_str(&format!(
                "dt = {} ({}), t_max = {} ({}), cutoff = {}\n",
                format_float(r.dt),
                if r.dt_auto { "auto" } else { "given" },
                format_float(r.t_max),
                if r.t_max_auto { "auto" } else { "given" },
                r.cutoff
            ));
        }
        if let Some(m) = &self.memory {
            s.push_str(&format!(
                "memory ({}): {} (full space, dimension {}), {} (excitation sector, dimension {})\n",
                solver_name(m.solver),
                human_bytes(m.full_bytes),
                m.full_dim,
                human_bytes(m.sector_bytes),
                m.sector_dim
            ));
        }
        for f in &self.findings {
            let tag = match f.level {
                Level::Info => "info",
                Level::Warning => "warning",
                Level::Error => "error",
            };
            s.push_str(&format!("{tag}[{}]: {}\n", f.code, f.message));
        }
        if self.is_clean() {
            s.push_str("clean\n");
        }
        s
    }
}

fn human_bytes(b: u64) -> String {
    let b = b as f64;
    if b >= 1e9 {
        format!("{:.2} GB", b / 1e9)
    } else if b >= 1e6 {
        format!("{:.1} MB", b / 1e6)
    } else {
        format!("{:.0} kB", b / 1e3)
    }
}

/// Memory of one run of `solver`.
pub fn memory_estimate(
    solver: SolverChoice,
    modes: usize,
    cutoff: usize,
    workers: usize,
) -> MemoryEstimate {
    let full = (cutoff as u64).saturating_pow(modes as u32);
    let sector = FockSpace::new(modes, cutoff)
        .map(|s| ExcitationSector::new(s, cutoff - 1).dim() as u64)
        .unwrap_or(full);
    let bytes = |d: u64| -> u64 {
        match solver {
            SolverChoice::Ensemble => {
                d * 16 * TRAJECTORY_BUFFERS * BATCH_WIDTH as u64 * workers.max(1) as u64
            }
            _ => d.saturating_mul(d).saturating_mul(16 * MASTER_BUFFERS),
        }
    };
    MemoryEstimate {
        solver,
        full_dim: full,
        sector_dim: sector,
        full_bytes: bytes(full),
        sector_bytes: bytes(sector),
    }
}

/// Static checks of a config; never runs a simulation.
pub fn cmd_validate(cfg: &ExperimentConfig, workers: usize) -> ValidationReport {
    let mut findings = Vec::new();
    let mut push = |level, code, message: String| {
        findings.push(Finding {
            level,
            code,
            message,
        })
    };
    let alpha = cfg.alpha().norm();
    let cutoff = cfg.cutoff();
    let tail = poisson_tail(alpha, cutoff);
    if tail > MAX_TAIL_MASS {
        push(
            Level::Warning,
            "cutoff",
            format!(
                "cutoff {cutoff} truncates {:.2}% of the coherent-state weight for |alpha| = {alpha}; use at least {}",
                100.0 * tail,
                recommended_cutoff(alpha)
            ),
        );
    } else if cutoff < recommended_cutoff(alpha) {
        push(
            Level::Info,
            "cutoff",
            format!(
                "cutoff {cutoff} is below the rule of thumb {} (tail {tail:.1e})",
                recommended_cutoff(alpha)
            ),
        );
    }
    let spec = cfg.system_spec();
    let env = cfg.environment();
    let solver = cfg.solver();
    if solver == SolverChoice::Ensemble && matches!(env, Ok(Environment::Markovian { .. })) {
        push(
            Level::Error,
            "solver",
            "the ensemble path needs a colored (ou) environment".into(),
        );
    }
    let resolved = match cfg.resolve() {
        Ok(r) => Some(r),
        Err(e) => {
            push(
                Level::Error,
                "coefficients",
                format!("coefficient estimate failed: {e}"),
            );
            None
        }
    };
    if let (Some(r), Ok(spec), Ok(env)) = (&resolved, &spec, &env) {
        let k = r.probe_interval / r.dt;
        if (k - k.round()).abs() > 1e-9 * k.max(1.0) {
            push(
                Level::Error,
                "dt",
                format!(
                    "probe interval {} is not a multiple of dt = {}",
                    r.probe_interval, r.dt
                ),
            );
        }
        let sum_l2: f64 = spec.weights.iter().map(|l| l * l).sum();
        let stiff = r.dt * 2.0 * r.max_coefficient * (r.cutoff as f64 - 1.0) * sum_l2;
        if stiff > STIFFNESS_BUDGET {
            push(
                Level::Warning,
                "dt",
                format!(
                    "dt = {} resolves the dissipative rate poorly (dt * rate = {stiff:.2} > {STIFFNESS_BUDGET}); expect positivity violations",
                    r.dt
                ),
            );
        }
        if let Environment::Ou(l) = env {
            let fastest = spec
                .omegas
                .iter()
                .map(|w| (l.rate() - C64::new(0.0, *w)).norm())
                .fold(0.0, f64::max);
            if 0.5 * r.dt * fastest > 0.5 {
                push(
                    Level::Warning,
                    "dt",
                    format!(
                        "coefficient grid dt/2 = {} under-resolves the fastest environment frequency {fastest:.3}",
                        0.5 * r.dt
                    ),
                );
            }
            if cfg.environment.beta.is_some() {
                let steps = (r.t_max / r.dt).round() as usize;
                if steps > cfg.numerics.thermal_step_cap {
                    push(
                        Level::Warning,
                        "thermal",
                        format!(
                            "thermal coefficients need {steps} steps (cap {}, about {})",
                            cfg.numerics.thermal_step_cap,
                            human_bytes(thermal_memory_bytes(steps, spec.num_modes()))
                        ),
                    );
                }
            }
        }
    }
    let memory = memory_estimate(solver, cfg.system.modes, cutoff, workers);
    if memory.full_bytes > MEMORY_FLAG_BYTES {
        let advice = if solver == SolverChoice::Master {
            "; the ensemble path stores kets only and is recommended"
        } else {
            ""
        };
        push(
            Level::Warning,
            "memory",
            format!(
                "{} path needs about {} in the full Fock space ({} in the excitation sector){advice}",
                solver_name(solver),
                human_bytes(memory.full_bytes),
                human_bytes(memory.sector_bytes)
            ),
        );
    }
    ValidationReport {
        findings,
        memory: Some(memory),
        resolved,
    }
}
