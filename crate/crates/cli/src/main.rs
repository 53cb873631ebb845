use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cradle_core::config::ExperimentConfig;
use cradle_core::experiment::{
    cmd_coeffs, cmd_run, cmd_sweep, cmd_validate, CommandOptions, RunManifest,
};
use cradle_core::CradleError;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_PARTIAL: u8 = 4;

/// Cat-state transfer through a structured environment: runs, sweeps and coefficient maps.
#[derive(Parser, Debug)]
#[command(name = "cradle", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML config, or a run manifest (`manifest.json`) to replay.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Named preset; a config file given with it overrides its keys.
    /// One of tau-sweep, delta-sweep, fmap, eta-sweep, revival, lambda-sweep
    /// (or fig2a, fig3a, fig4, fig5, fig6a, fig7).
    #[arg(long, global = true)]
    preset: Option<String>,

    /// Overrides `output.directory`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Overrides `numerics.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for sweep points and trajectories.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one simulation.
    Run,
    /// Run every point of the sweep block.
    Sweep,
    /// Tabulate environment coefficients (and the fmap grid) without propagating states.
    Coeffs,
    /// Check a config statically.
    Validate,
}

fn exit_code(e: &CradleError) -> u8 {
    match e {
        CradleError::Config(_)
        | CradleError::Io(_)
        | CradleError::Format(_)
        | CradleError::InvalidParameter(_)
        | CradleError::CutoffTooSmall { .. } => EXIT_CONFIG,
        _ => EXIT_NUMERICAL,
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig, CradleError> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), cli.preset.as_deref())?;
    if let Some(dir) = &cli.out_dir {
        cfg.output.directory = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.numerics.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn summarize(manifest: &RunManifest, dir: &std::path::Path) {
    for run in &manifest.runs {
        let value = run
            .sweep_value
            .map(|v| format!(" = {v}"))
            .unwrap_or_default();
        let maxima: Vec<String> = run
            .max_fidelity
            .iter()
            .enumerate()
            .map(|(i, (f, t))| format!("F{} {f:.4} (t {t})", i + 1))
            .collect();
        let error = run
            .error
            .as_ref()
            .map(|e| format!(": {e}"))
            .unwrap_or_default();
        println!(
            "{}{value} [{}] {}{error}",
            run.label,
            run.status,
            maxima.join(", ")
        );
    }
    println!(
        "{} files, manifest {}, {:.1} s",
        manifest.files.len(),
        dir.join("manifest.json").display(),
        manifest.wall_time_s
    );
}

fn execute(cli: &Cli) -> Result<u8, CradleError> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CradleError::Config(format!("cannot start {n} workers: {e}")))?;
    }
    let cfg = load(cli)?;
    let opts = CommandOptions {
        preset: cli.preset.clone(),
        workers: Some(rayon::current_num_threads()),
    };
    let dir = cfg.output_dir().to_path_buf();
    match cli.command {
        Command::Run => summarize(&cmd_run(&cfg, &opts)?, &dir),
        Command::Coeffs => summarize(&cmd_coeffs(&cfg, &opts)?, &dir),
        Command::Sweep => {
            let manifest = cmd_sweep(&cfg, &opts)?;
            summarize(&manifest, &dir);
            let failed = manifest.failed_runs();
            if failed > 0 {
                eprintln!("{failed} of {} sweep points failed", manifest.runs.len());
                return Ok(EXIT_PARTIAL);
            }
        }
        Command::Validate => print!(
            "{}",
            cmd_validate(&cfg, rayon::current_num_threads()).render()
        ),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
