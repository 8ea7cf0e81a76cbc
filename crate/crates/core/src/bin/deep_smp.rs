//! Command-line front end: `run` trains configured solvers, `oracle`
//! evaluates the deterministic benchmark, `gradcheck` verifies the autodiff
//! layer. One experiment per process; Monte-Carlo evaluation parallelism
//! follows `RAYON_NUM_THREADS`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deep_smp::config::{ConfigError, ExperimentConfig};
use deep_smp::nn;
use deep_smp::runner::{self, RunnerError};

/// Exit code for unreadable, unparsable, or invalid configs.
const EXIT_CONFIG: u8 = 2;
/// Exit code for training runs aborted on persistent non-finite losses.
const EXIT_NON_FINITE: u8 = 3;
/// Largest relative gradient error `gradcheck` accepts.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "deep-smp",
    version,
    about = "Deep stochastic-maximum-principle solver: primal/dual FBSDE training, \
             Monte-Carlo value bounds, and a deterministic dual-value benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured solver(s); write step histories, bound traces,
    /// and summary.json into the output directory.
    Run {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override every solver's training-step budget.
        #[arg(long)]
        steps: Option<usize>,
        /// Override the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Suppress per-evaluation progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate the deterministic dual-value benchmark and write the
    /// per-grid-point minimizers.
    Oracle {
        /// Experiment config (TOML); its market/constraint/oracle sections
        /// drive the evaluation.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Check every autodiff primitive and head architecture against central
    /// differences; exits 0 only if all errors stay within 1e-4.
    Gradcheck {
        /// Seed for the randomized operands.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config, seed, steps, output_dir, quiet } => {
            run(config, seed, steps, output_dir, quiet)
        }
        Command::Oracle { config, output_dir } => oracle(config, output_dir),
        Command::Gradcheck { seed } => gradcheck(seed),
    }
}

fn load(
    path: &PathBuf,
    seed: Option<u64>,
    steps: Option<usize>,
    output_dir: Option<PathBuf>,
) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    if let Some(n) = steps {
        cfg.override_steps(n);
    }
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    // Overrides can break invariants the file satisfied (e.g. an epoch
    // count that no longer divides the step budget), so check again.
    cfg.validate()?;
    Ok(cfg)
}

fn config_failure(err: &ConfigError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(EXIT_CONFIG)
}

fn run(
    path: PathBuf,
    seed: Option<u64>,
    steps: Option<usize>,
    output_dir: Option<PathBuf>,
    quiet: bool,
) -> ExitCode {
    let cfg = match load(&path, seed, steps, output_dir) {
        Ok(cfg) => cfg,
        Err(err) => return config_failure(&err),
    };
    let log = |line: &str| {
        if !quiet {
            println!("{line}");
        }
    };
    match runner::run(&cfg, log) {
        Ok(report) => {
            let s = &report.summary;
            println!("summary:");
            if let Some(v) = s.oracle_value {
                println!("  oracle value   {v:.6}");
            }
            if let Some(p) = &s.primal {
                println!("  V_l            {:.6} ± {:.6}", p.lower, p.lower_stderr);
                println!("  V_u            {:.6} ± {:.6}", p.upper, p.upper_stderr);
                println!("  p0             {:.6}", p.scalar);
            }
            if let Some(d) = &s.dual {
                println!("  Vtilde_l       {:.6} ± {:.6}", d.lower, d.lower_stderr);
                println!("  Vtilde_u       {:.6} ± {:.6}", d.upper, d.upper_stderr);
                println!("  y              {:.6}", d.scalar);
            }
            match (report.primal_seconds, report.dual_seconds) {
                (Some(p), Some(d)) => println!("  wall time      primal {p:.1}s, dual {d:.1}s"),
                (Some(p), None) => println!("  wall time      primal {p:.1}s"),
                (None, Some(d)) => println!("  wall time      dual {d:.1}s"),
                (None, None) => {}
            }
            println!("outputs in {}", cfg.output_dir.display());
            ExitCode::SUCCESS
        }
        Err(RunnerError::Config(err)) => config_failure(&err),
        Err(err @ RunnerError::Train(_)) => {
            eprintln!("error: {err}");
            ExitCode::from(EXIT_NON_FINITE)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn oracle(path: PathBuf, output_dir: Option<PathBuf>) -> ExitCode {
    let cfg = match load(&path, None, None, output_dir) {
        Ok(cfg) => cfg,
        Err(err) => return config_failure(&err),
    };
    match runner::run_oracle(&cfg) {
        Ok((report, csv_path)) => {
            println!("dual value {:.6}", report.value);
            println!("minimizers in {}", csv_path.display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn gradcheck(seed: u64) -> ExitCode {
    let entries = nn::gradient_suite(seed);
    let width = entries.iter().map(|e| e.name.len()).max().unwrap_or(0);
    let mut worst: f64 = 0.0;
    for entry in &entries {
        let verdict = if entry.error <= GRAD_TOLERANCE { "ok" } else { "FAIL" };
        println!("{:<width$}  {:>10.3e}  {verdict}", entry.name, entry.error);
        worst = worst.max(entry.error);
    }
    println!(
        "max relative error {worst:.3e} over {} cases (tolerance {GRAD_TOLERANCE:.0e})",
        entries.len()
    );
    if worst <= GRAD_TOLERANCE {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
