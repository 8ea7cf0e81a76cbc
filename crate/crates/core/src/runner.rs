//! Runs one configured experiment end to end: trains the requested
//! solver(s), evaluates the oracle when enabled, and writes all outputs
//! into the config's output directory.
//!
//! Files written (per enabled side):
//! - `history_primal.csv` — `step,seconds,p0`, one row per training step
//! - `bounds_primal.csv` — `step,V_l,V_l_stderr,V_u,V_u_stderr`
//! - `history_dual.csv` — `step,seconds,y`
//! - `bounds_dual.csv` — `step,Vtilde_l,Vtilde_l_stderr,Vtilde_u,Vtilde_u_stderr`
//! - `oracle_points.csv` — `t,objective,v_star...` (one column per coordinate)
//! - `params_primal.json` / `params_dual.json` — when `snapshots = true`
//! - `summary.json` — final bounds and trained scalars
//!
//! CSV floats carry six significant digits. `summary.json` holds only
//! run-deterministic values (no wall-clock timings), so re-running the same
//! config and seed reproduces it byte for byte; timing lives in the
//! `seconds` CSV column and the progress log.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ExperimentConfig};
use crate::nn;
use crate::oracle::{self, OracleReport};
use crate::solver::dual::DualSolver;
use crate::solver::primal::PrimalSolver;
use crate::solver::{BoundsEstimate, TrainError, TrainingHistory};

/// Why a run failed.
#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("solver construction failed: {0}")]
    Build(String),
    #[error("oracle evaluation failed: {0}")]
    Oracle(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Final state of one trained side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideSummary {
    pub lower: f64,
    pub lower_stderr: f64,
    pub upper: f64,
    pub upper_stderr: f64,
    /// Trained scalar: the adjoint start p₀ (primal) or the dual start y.
    pub scalar: f64,
}

/// Deterministic payload of `summary.json`.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub primal: Option<SideSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dual: Option<SideSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_value: Option<f64>,
}

/// What a completed run produced.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub summary: Summary,
    /// Every file the run wrote, in write order.
    pub files: Vec<PathBuf>,
    /// Training wall time per side, seconds.
    pub primal_seconds: Option<f64>,
    pub dual_seconds: Option<f64>,
}

/// Formats a float with six significant digits for CSV cells.
fn sig6(x: f64) -> String {
    format!("{x:.5e}")
}

fn write_file(path: PathBuf, contents: &str) -> Result<PathBuf, RunnerError> {
    fs::write(&path, contents).map_err(|source| RunnerError::Io { path: path.clone(), source })?;
    Ok(path)
}

fn history_csv(scalar_name: &str, history: &TrainingHistory) -> String {
    let mut out = format!("step,seconds,{scalar_name}\n");
    for rec in &history.steps {
        let _ = writeln!(out, "{},{},{}", rec.step, sig6(rec.seconds), sig6(rec.value));
    }
    out
}

fn bounds_csv(prefix: &str, history: &TrainingHistory) -> String {
    let mut out = format!("step,{prefix}_l,{prefix}_l_stderr,{prefix}_u,{prefix}_u_stderr\n");
    for rec in &history.bounds {
        let b = rec.bounds;
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            rec.step,
            sig6(b.lower),
            sig6(b.lower_stderr),
            sig6(b.upper),
            sig6(b.upper_stderr)
        );
    }
    out
}

fn oracle_points_csv(report: &OracleReport) -> String {
    let coords = report.points.first().map_or(0, |p| p.v_star.len());
    let mut out = String::from("t,objective");
    for j in 1..=coords {
        let _ = write!(out, ",v{j}");
    }
    out.push('\n');
    for p in &report.points {
        let _ = write!(out, "{},{}", sig6(p.t), sig6(p.objective));
        for v in &p.v_star {
            let _ = write!(out, ",{}", sig6(*v));
        }
        out.push('\n');
    }
    out
}

fn side_summary(bounds: &BoundsEstimate, scalar: f64) -> SideSummary {
    SideSummary {
        lower: bounds.lower,
        lower_stderr: bounds.lower_stderr,
        upper: bounds.upper,
        upper_stderr: bounds.upper_stderr,
        scalar,
    }
}

/// Serializes the summary. Field order is fixed by the struct, floats use
/// the shortest round-trip representation, so equal summaries yield equal
/// bytes.
pub fn summary_json(summary: &Summary) -> String {
    let mut s =
        serde_json::to_string_pretty(summary).expect("summary serialization cannot fail");
    s.push('\n');
    s
}

/// Runs the experiment, reporting progress lines through `log`.
pub fn run(
    cfg: &ExperimentConfig,
    mut log: impl FnMut(&str),
) -> Result<RunReport, RunnerError> {
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|source| RunnerError::Io { path: cfg.output_dir.clone(), source })?;

    let mut report = RunReport {
        summary: Summary { seed: cfg.seed, ..Summary::default() },
        files: Vec::new(),
        primal_seconds: None,
        dual_seconds: None,
    };

    if let Some(oracle_cfg) = cfg.oracle_config() {
        let oracle_report = oracle::log_dual_value(&oracle_cfg).map_err(RunnerError::Oracle)?;
        log(&format!(
            "oracle: deterministic dual value {:.6} over {} grid points",
            oracle_report.value, oracle_cfg.grid_points
        ));
        report.summary.oracle_value = Some(oracle_report.value);
        report.files.push(write_file(
            cfg.output_dir.join("oracle_points.csv"),
            &oracle_points_csv(&oracle_report),
        )?);
    }

    if cfg.solver.runs_primal() {
        let solver_cfg = cfg.primal_config()?;
        let total = solver_cfg.total_steps;
        let mut solver = PrimalSolver::new(
            solver_cfg,
            cfg.market.clone(),
            cfg.utility,
            cfg.constraint.clone(),
        )
        .map_err(RunnerError::Build)?;
        log(&format!("primal: training {total} steps"));
        let history = solver.train(|rec| {
            log(&format!(
                "primal step {}: V_l {:.6} ± {:.6}, V_u {:.6} ± {:.6}",
                rec.step,
                rec.bounds.lower,
                rec.bounds.lower_stderr,
                rec.bounds.upper,
                rec.bounds.upper_stderr
            ));
        })?;
        let seconds = history.steps.last().map_or(0.0, |r| r.seconds);
        log(&format!("primal: done in {seconds:.1}s"));
        report.primal_seconds = Some(seconds);
        let last = history.bounds.last().expect("training always evaluates the final step");
        report.summary.primal = Some(side_summary(&last.bounds, solver.p0_value()));
        report.files.push(write_file(
            cfg.output_dir.join("history_primal.csv"),
            &history_csv("p0", &history),
        )?);
        report.files.push(write_file(
            cfg.output_dir.join("bounds_primal.csv"),
            &bounds_csv("V", &history),
        )?);
        if cfg.snapshots {
            report.files.push(write_file(
                cfg.output_dir.join("params_primal.json"),
                &nn::snapshot_json(solver.store()),
            )?);
        }
    }

    if cfg.solver.runs_dual() {
        let solver_cfg = cfg.dual_config()?;
        let total = solver_cfg.total_steps;
        let mut solver = DualSolver::new(
            solver_cfg,
            cfg.market.clone(),
            cfg.utility,
            cfg.constraint.clone(),
        )
        .map_err(RunnerError::Build)?;
        log(&format!("dual: training {total} steps"));
        let history = solver.train(|rec| {
            log(&format!(
                "dual step {}: Vtilde_l {:.6} ± {:.6}, Vtilde_u {:.6} ± {:.6}",
                rec.step,
                rec.bounds.lower,
                rec.bounds.lower_stderr,
                rec.bounds.upper,
                rec.bounds.upper_stderr
            ));
        })?;
        let seconds = history.steps.last().map_or(0.0, |r| r.seconds);
        log(&format!("dual: done in {seconds:.1}s"));
        report.dual_seconds = Some(seconds);
        let last = history.bounds.last().expect("training always evaluates the final step");
        report.summary.dual = Some(side_summary(&last.bounds, solver.y_value()));
        report.files.push(write_file(
            cfg.output_dir.join("history_dual.csv"),
            &history_csv("y", &history),
        )?);
        report.files.push(write_file(
            cfg.output_dir.join("bounds_dual.csv"),
            &bounds_csv("Vtilde", &history),
        )?);
        if cfg.snapshots {
            report.files.push(write_file(
                cfg.output_dir.join("params_dual.json"),
                &nn::snapshot_json(solver.store()),
            )?);
        }
    }

    report.files.push(write_file(
        cfg.output_dir.join("summary.json"),
        &summary_json(&report.summary),
    )?);
    Ok(report)
}

/// Evaluates the oracle alone (the `oracle` subcommand): writes the
/// per-grid-point minimizer CSV and returns the report.
pub fn run_oracle(cfg: &ExperimentConfig) -> Result<(OracleReport, PathBuf), RunnerError> {
    let oracle_cfg = cfg
        .oracle_config()
        .ok_or_else(|| RunnerError::Oracle("the config disables the oracle".into()))?;
    let report = oracle::log_dual_value(&oracle_cfg).map_err(RunnerError::Oracle)?;
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|source| RunnerError::Io { path: cfg.output_dir.clone(), source })?;
    let path = write_file(
        cfg.output_dir.join("oracle_points.csv"),
        &oracle_points_csv(&report),
    )?;
    Ok((report, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke_toml(dir: &std::path::Path) -> String {
        format!(
            r#"
            solver = "both"
            seed = 7
            output_dir = "{}"
            snapshots = true

            [problem]
            x0 = 10.0
            horizon = 0.5
            n_time_steps = 4

            [market]
            kind = "deterministic_sine"
            stocks = 2
            rate = {{ level = 0.06, growth = 0.5 }}
            drifts = {{ base = 0.07, amplitude = 0.02, phase_divisor = 15.0 }}
            vol = {{ diag = {{ kind = "sqrt_ramp", scale = 0.3 }}, off_diag = 0.1 }}

            [utility]
            kind = "log"

            [constraint]
            kind = "floor_box"
            kappa = 0.5
            dim = 2

            [primal]
            total_steps = 6
            batch_size = 16
            n_mc = 400
            eval_every = 3
            bn_epsilon = 100.0
            lr_bsde = {{ boundaries = [], values = [1e-2] }}
            lr_control = {{ boundaries = [], values = [1e-3] }}

            [dual]
            total_steps = 6
            batch_size = 16
            n_mc = 400
            eval_every = 3
            bn_epsilon = 100.0
            lr_bsde = {{ boundaries = [], values = [1e-2] }}
            lr_control = {{ boundaries = [], values = [1e-2] }}
            lr_y = {{ boundaries = [], values = [1e-2] }}

            [oracle]
            grid_points = 50
            "#,
            dir.display()
        )
    }

    #[test]
    fn a_smoke_run_writes_every_contracted_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg =
            ExperimentConfig::from_toml_str(&smoke_toml(dir.path())).unwrap();
        let report = run(&cfg, |_| {}).unwrap();

        for name in [
            "oracle_points.csv",
            "history_primal.csv",
            "bounds_primal.csv",
            "params_primal.json",
            "history_dual.csv",
            "bounds_dual.csv",
            "params_dual.json",
            "summary.json",
        ] {
            let path = dir.path().join(name);
            assert!(path.is_file(), "missing {name}");
            assert!(report.files.contains(&path), "{name} unreported");
        }

        let history = fs::read_to_string(dir.path().join("history_primal.csv")).unwrap();
        let mut lines = history.lines();
        assert_eq!(lines.next(), Some("step,seconds,p0"));
        assert_eq!(lines.count(), 6, "one row per training step");

        let bounds = fs::read_to_string(dir.path().join("bounds_dual.csv")).unwrap();
        let mut lines = bounds.lines();
        assert_eq!(
            lines.next(),
            Some("step,Vtilde_l,Vtilde_l_stderr,Vtilde_u,Vtilde_u_stderr")
        );
        assert_eq!(lines.count(), 2, "evaluations at steps 3 and 6");

        let summary = report.summary;
        assert!(summary.primal.is_some() && summary.dual.is_some());
        assert!(summary.oracle_value.unwrap().is_finite());
        assert_eq!(summary.seed, 7);
    }

    #[test]
    fn identical_configs_produce_byte_identical_summaries() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg_a =
            ExperimentConfig::from_toml_str(&smoke_toml(dir_a.path())).unwrap();
        let cfg_b =
            ExperimentConfig::from_toml_str(&smoke_toml(dir_b.path())).unwrap();
        run(&cfg_a, |_| {}).unwrap();
        run(&cfg_b, |_| {}).unwrap();
        let a = fs::read(dir_a.path().join("summary.json")).unwrap();
        let b = fs::read(dir_b.path().join("summary.json")).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn csv_floats_carry_six_significant_digits() {
        assert_eq!(sig6(2.343_349_123), "2.34335e0");
        assert_eq!(sig6(-0.000_123_456_7), "-1.23457e-4");
        assert_eq!(sig6(0.0), "0.00000e0");
    }

    #[test]
    fn the_oracle_subcommand_path_writes_points_and_reports_the_value() {
        let dir = tempfile::tempdir().unwrap();
        let cfg =
            ExperimentConfig::from_toml_str(&smoke_toml(dir.path())).unwrap();
        let (report, path) = run_oracle(&cfg).unwrap();
        assert!(report.value.is_finite());
        assert_eq!(report.points.len(), 50);
        let csv = fs::read_to_string(path).unwrap();
        assert!(csv.starts_with("t,objective,v1,v2\n"));
        assert_eq!(csv.lines().count(), 51);
    }

    #[test]
    fn a_diverging_run_reports_the_nan_threshold_error() {
        let dir = tempfile::tempdir().unwrap();
        // An absurd lr_bsde throws p₀ to ±1e200 after one update, so the
        // squared terminal loss overflows and stays non-finite, tripping
        // the abort threshold.
        let text = smoke_toml(dir.path())
            .replace(
                "lr_bsde = { boundaries = [], values = [1e-2] }",
                "lr_bsde = { boundaries = [], values = [1e200] }",
            )
            .replace("total_steps = 6", "total_steps = 80")
            .replace("solver = \"both\"", "solver = \"primal\"");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        match run(&cfg, |_| {}) {
            Err(RunnerError::Train(err)) => {
                assert!(err.to_string().contains("bn_epsilon"), "{err}");
            }
            other => panic!("expected a training failure, got {other:?}"),
        }
    }
}
