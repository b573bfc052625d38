//! Command-line front end for sample-and-hold simulation experiments.
//!
//! One binary, four verbs selected by `--verb`:
//!
//!   check         renewal and fluctuation distribution self-checks
//!   sweep         Monte Carlo error sweep over n with log-log rate fits
//!   path          dump one coupled trajectory set as CSV
//!   list-systems  print the named systems usable in configs
//!
//! Exit codes: 0 success, 2 bad config or arguments, 3 failed numerical
//! assertion, 4 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use holdsim::experiments::{run_checks, run_path, run_sweep, z_gaussianity_check, ExperimentError};
use holdsim::nonlindyn;
use holdsim_cli::config::{parse_config, resolve_check, resolve_experiment, RawConfig};
use holdsim_cli::report::{path_csv, sweep_csv, to_json, CheckDocument, OutputWriter};
use holdsim_cli::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "holdsim",
    version,
    about = "Monte Carlo study of randomly sampled feedback control under small noise"
)]
struct Args {
    /// What to run.
    #[arg(long, value_enum)]
    verb: Verb,

    /// Experiment configuration file (TOML). Required except for list-systems.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory for reports and the run manifest.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Override the master seed from the config file.
    #[arg(long)]
    seed: Option<u64>,

    /// Worker thread count (default: all cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Verb {
    Check,
    Sweep,
    Path,
    ListSystems,
}

impl Verb {
    fn name(self) -> &'static str {
        match self {
            Verb::Check => "check",
            Verb::Sweep => "sweep",
            Verb::Path => "path",
            Verb::ListSystems => "list-systems",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(args: &Args) -> Result<(), CliError> {
    if let Some(threads) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Parse(format!("--threads: {e}")))?;
    }
    match args.verb {
        Verb::ListSystems => {
            list_systems();
            Ok(())
        }
        Verb::Check => verb_check(args),
        Verb::Sweep => verb_sweep(args),
        Verb::Path => verb_path(args),
    }
}

fn load_config(args: &Args) -> Result<(RawConfig, String), CliError> {
    let path = args.config.as_ref().ok_or_else(|| {
        CliError::Parse(format!(
            "--config is required for the {} verb",
            args.verb.name()
        ))
    })?;
    parse_config(path)
}

/// Invariant violations in the experiment layer are configuration mistakes;
/// everything else that bubbles up is a failed numerical contract.
fn from_experiment(e: ExperimentError) -> CliError {
    match e {
        ExperimentError::Config(_) => CliError::Parse(e.to_string()),
        other => CliError::Assertion(other.to_string()),
    }
}

fn list_systems() {
    println!("linear systems:");
    println!("  scalar_s1       1d, a=1 b=1 k=2, x0=1");
    println!("  jordan_pair     2d Jordan block, bk=2I, x0=(0.6, 0.8)");
    println!("nonlinear systems:");
    for name in nonlindyn::builtin_names() {
        let sys = nonlindyn::builtin(name).expect("builtin names resolve");
        println!(
            "  {:<15} {}d, Lipschitz estimate {:.3}",
            name,
            sys.dim(),
            sys.lipschitz_estimate()
        );
    }
}

fn verb_check(args: &Args) -> Result<(), CliError> {
    let (raw, text) = load_config(args)?;
    let p = resolve_check(&raw, args.seed)?;
    let mut checks =
        run_checks(&p.dist, p.n, p.horizon, p.replications, p.seed).map_err(from_experiment)?;
    checks.push(z_gaussianity_check(p.pitch, p.replications, p.seed).map_err(from_experiment)?);

    let failed = checks.iter().filter(|c| !c.pass).count();
    for c in &checks {
        println!(
            "check {:<22} statistic {:>12.6} target {:>12.6} tolerance {:>12.6} {}",
            c.name,
            c.statistic,
            c.target,
            c.tolerance,
            if c.pass { "pass" } else { "FAIL" }
        );
    }

    let doc = CheckDocument { checks };
    let mut w = OutputWriter::new(&args.out)?;
    w.write("report.json", &to_json(&doc)?)?;
    w.finish(
        "check",
        p.seed,
        &text,
        serde_json::json!({
            "checks": doc.checks.len(),
            "failed": failed,
        }),
    )?;
    if failed > 0 {
        return Err(CliError::Assertion(format!(
            "{failed} of {} checks failed",
            doc.checks.len()
        )));
    }
    Ok(())
}

fn verb_sweep(args: &Args) -> Result<(), CliError> {
    let (raw, text) = load_config(args)?;
    let cfg = resolve_experiment(&raw, args.seed)?;
    let report = run_sweep(&cfg).map_err(from_experiment)?;

    for fit in &report.fits {
        println!(
            "fit {:<10} slope {:+.4} (se {:.4}, r2 {:.4}, {} points)",
            fit.metric, fit.slope, fit.slope_se, fit.r_squared, fit.points_used
        );
    }
    if report.fits.is_empty() {
        println!("no rate fits (needs at least 30 replications and 3 admissible points)");
    }
    println!(
        "aborted {} of {} replications",
        report.aborted, report.total_replications
    );

    let mut w = OutputWriter::new(&args.out)?;
    w.write("points.csv", &sweep_csv(&report))?;
    w.write("report.json", &to_json(&report)?)?;
    w.finish(
        "sweep",
        cfg.seed,
        &text,
        serde_json::json!({
            "points": report.points.len(),
            "fits": report.fits,
            "aborted": report.aborted,
            "total_replications": report.total_replications,
        }),
    )?;
    Ok(())
}

fn verb_path(args: &Args) -> Result<(), CliError> {
    let (raw, text) = load_config(args)?;
    let cfg = resolve_experiment(&raw, args.seed)?;
    let dump = run_path(&cfg).map_err(from_experiment)?;
    println!(
        "path dump: {} mesh points, columns: t, {}",
        dump.times.len(),
        dump.labels.join(", ")
    );

    let mut w = OutputWriter::new(&args.out)?;
    w.write("path.csv", &path_csv(&dump))?;
    w.finish(
        "path",
        cfg.seed,
        &text,
        serde_json::json!({
            "mesh_points": dump.times.len(),
            "labels": dump.labels,
        }),
    )?;
    Ok(())
}
