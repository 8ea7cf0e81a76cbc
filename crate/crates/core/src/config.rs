//! Experiment configuration: a single TOML file describing the market, the
//! objective, the constraint set, and the solver(s) to train.
//!
//! Parsing is strict. Unknown keys anywhere in the document are rejected
//! with their full path, so a typo like `lr_bdse` fails loudly instead of
//! silently training with a default. Configs round-trip: parsing the
//! serialization of a parsed config yields the same value.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::market::MarketModel;
use crate::optim::PiecewiseSchedule;
use crate::oracle::{OracleConfig, Quadrature};
use crate::solver::dual::{DualArchitecture, DualConfig, DualInitRanges};
use crate::solver::primal::{PrimalArchitecture, PrimalConfig, PrimalInitRanges};
use crate::utility::Utility;

/// Which side(s) of the problem a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Primal,
    Dual,
    Both,
}

impl SolverKind {
    pub fn runs_primal(self) -> bool {
        matches!(self, SolverKind::Primal | SolverKind::Both)
    }

    pub fn runs_dual(self) -> bool {
        matches!(self, SolverKind::Dual | SolverKind::Both)
    }
}

/// The continuous-time problem both solvers discretize: initial wealth,
/// horizon, and the number of Euler time steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub x0: f64,
    pub horizon: f64,
    pub n_time_steps: usize,
}

fn default_batch_size() -> usize {
    64
}

fn default_n_mc() -> usize {
    100_000
}

fn default_eval_every() -> usize {
    200
}

/// Training knobs of the primal solver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimalSection {
    pub total_steps: usize,
    /// When set, the run revisits a fixed dataset of `total_steps / epochs`
    /// noise batches once per epoch instead of drawing fresh noise.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Batch-norm variance offset. Large values damp the normalization
    /// early in training; raise this if a run aborts on non-finite losses.
    pub bn_epsilon: f64,
    pub lr_bsde: PiecewiseSchedule,
    pub lr_control: PiecewiseSchedule,
    #[serde(default)]
    pub architecture: PrimalArchitecture,
    #[serde(default)]
    pub init: PrimalInitRanges,
}

/// Training knobs of the dual solver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualSection {
    pub total_steps: usize,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    pub bn_epsilon: f64,
    pub lr_bsde: PiecewiseSchedule,
    pub lr_control: PiecewiseSchedule,
    /// Learning rate of the scalar dual initial value y.
    pub lr_y: PiecewiseSchedule,
    #[serde(default)]
    pub architecture: DualArchitecture,
    #[serde(default)]
    pub init: DualInitRanges,
}

fn default_grid_points() -> usize {
    1_000
}

fn default_tolerance() -> f64 {
    1e-10
}

fn default_enabled() -> bool {
    true
}

/// Deterministic dual-value benchmark, available for log utility on markets
/// with deterministic coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    #[serde(default = "default_enabled")]
    pub enabled: bool,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub quadrature: Quadrature,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            enabled: true,
            grid_points: default_grid_points(),
            tolerance: default_tolerance(),
            quadrature: Quadrature::default(),
        }
    }
}

/// A full experiment: one process runs exactly one of these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub solver: SolverKind,
    pub seed: u64,
    /// Directory the run writes its CSV/JSON outputs into (created if
    /// missing).
    pub output_dir: PathBuf,
    /// Also write JSON snapshots of all trained parameters at the end.
    #[serde(default)]
    pub snapshots: bool,
    pub problem: ProblemSection,
    pub market: MarketModel,
    pub utility: Utility,
    pub constraint: ConstraintSet,
    #[serde(default)]
    pub primal: Option<PrimalSection>,
    #[serde(default)]
    pub dual: Option<DualSection>,
    #[serde(default)]
    pub oracle: Option<OracleSection>,
}

/// Why a config could not be loaded.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), message: message.into() }
}

impl ExperimentConfig {
    /// Reads, parses, and validates a config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text)
    }

    /// Parses and validates a config from TOML text.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        reject_unknown_keys(text, &cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes back to TOML. Parsing the result yields the same value.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("experiment config serialization cannot fail")
    }

    /// Checks every cross-field invariant, reporting the offending field.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.problem;
        if p.x0 <= 0.0 {
            return Err(invalid("problem.x0", format!("must be positive, got {}", p.x0)));
        }
        if p.horizon <= 0.0 {
            return Err(invalid(
                "problem.horizon",
                format!("must be positive, got {}", p.horizon),
            ));
        }
        if p.n_time_steps == 0 {
            return Err(invalid("problem.n_time_steps", "must be at least 1"));
        }
        self.market
            .validate(p.horizon)
            .map_err(|m| invalid("market", m))?;
        self.utility.validate().map_err(|m| invalid("utility", m))?;
        self.constraint
            .validate()
            .map_err(|m| invalid("constraint", m))?;
        if self.constraint.dim() != self.market.total_dim() {
            return Err(invalid(
                "constraint",
                format!(
                    "dimension {} does not match the market's {} portfolio coordinates",
                    self.constraint.dim(),
                    self.market.total_dim()
                ),
            ));
        }
        if self.solver.runs_primal() {
            if self.primal.is_none() {
                return Err(invalid(
                    "primal",
                    format!("section is required when solver = \"{}\"", self.solver_name()),
                ));
            }
            let cfg = self.primal_config()?;
            cfg.validate().map_err(|m| invalid("primal", m))?;
        }
        if self.solver.runs_dual() {
            if self.dual.is_none() {
                return Err(invalid(
                    "dual",
                    format!("section is required when solver = \"{}\"", self.solver_name()),
                ));
            }
            let cfg = self.dual_config()?;
            cfg.validate().map_err(|m| invalid("dual", m))?;
        }
        if let Some(oracle) = &self.oracle {
            if oracle.enabled {
                if self.utility != Utility::Log {
                    return Err(invalid(
                        "oracle.enabled",
                        "the deterministic benchmark only covers log utility",
                    ));
                }
                self.oracle_config()
                    .expect("oracle section is present")
                    .validate()
                    .map_err(|m| invalid("oracle", m))?;
            }
        }
        Ok(())
    }

    fn solver_name(&self) -> &'static str {
        match self.solver {
            SolverKind::Primal => "primal",
            SolverKind::Dual => "dual",
            SolverKind::Both => "both",
        }
    }

    /// Assembles the primal solver config. Errors if the section is missing
    /// or a schedule is malformed.
    pub fn primal_config(&self) -> Result<PrimalConfig, ConfigError> {
        let s = self
            .primal
            .as_ref()
            .ok_or_else(|| invalid("primal", "section is missing"))?;
        check_schedule("primal.lr_bsde", &s.lr_bsde)?;
        check_schedule("primal.lr_control", &s.lr_control)?;
        Ok(PrimalConfig {
            x0: self.problem.x0,
            horizon: self.problem.horizon,
            n_time_steps: self.problem.n_time_steps,
            batch_size: s.batch_size,
            n_mc: s.n_mc,
            eval_every: s.eval_every,
            total_steps: s.total_steps,
            epochs: s.epochs,
            bn_epsilon: s.bn_epsilon,
            lr_bsde: s.lr_bsde.clone(),
            lr_control: s.lr_control.clone(),
            seed: self.seed,
            architecture: s.architecture,
            init: s.init,
        })
    }

    /// Assembles the dual solver config. Errors if the section is missing
    /// or a schedule is malformed.
    pub fn dual_config(&self) -> Result<DualConfig, ConfigError> {
        let s = self
            .dual
            .as_ref()
            .ok_or_else(|| invalid("dual", "section is missing"))?;
        check_schedule("dual.lr_bsde", &s.lr_bsde)?;
        check_schedule("dual.lr_control", &s.lr_control)?;
        check_schedule("dual.lr_y", &s.lr_y)?;
        Ok(DualConfig {
            x0: self.problem.x0,
            horizon: self.problem.horizon,
            n_time_steps: self.problem.n_time_steps,
            batch_size: s.batch_size,
            n_mc: s.n_mc,
            eval_every: s.eval_every,
            total_steps: s.total_steps,
            epochs: s.epochs,
            bn_epsilon: s.bn_epsilon,
            lr_bsde: s.lr_bsde.clone(),
            lr_control: s.lr_control.clone(),
            lr_y: s.lr_y.clone(),
            seed: self.seed,
            architecture: s.architecture,
            init: s.init,
        })
    }

    /// Assembles the oracle config when the section is present and enabled.
    pub fn oracle_config(&self) -> Option<OracleConfig> {
        let s = self.oracle.as_ref().filter(|s| s.enabled)?;
        let mut cfg = OracleConfig::new(
            self.market.clone(),
            self.constraint.clone(),
            self.problem.x0,
            self.problem.horizon,
        );
        cfg.grid_points = s.grid_points;
        cfg.tolerance = s.tolerance;
        cfg.quadrature = s.quadrature;
        Some(cfg)
    }

    /// Replaces the seed everywhere it matters (CLI `--seed`).
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    /// Replaces both solvers' step budgets (CLI `--steps`). Validation still
    /// applies afterwards, so an epoch count that no longer divides the
    /// budget is reported rather than silently patched.
    pub fn override_steps(&mut self, steps: usize) {
        if let Some(p) = &mut self.primal {
            p.total_steps = steps;
        }
        if let Some(d) = &mut self.dual {
            d.total_steps = steps;
        }
    }
}

/// Schedule invariants that the serde derive cannot enforce.
fn check_schedule(field: &str, s: &PiecewiseSchedule) -> Result<(), ConfigError> {
    if s.values.len() != s.boundaries.len() + 1 {
        return Err(invalid(
            field,
            format!(
                "needs exactly one more value than boundaries, got {} values for {} boundaries",
                s.values.len(),
                s.boundaries.len()
            ),
        ));
    }
    if !s.boundaries.windows(2).all(|w| w[0] < w[1]) {
        return Err(invalid(field, "boundaries must be strictly increasing"));
    }
    if let Some(v) = s.values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(invalid(field, format!("rates must be finite and non-negative, got {v}")));
    }
    Ok(())
}

/// Rejects keys the schema does not know, with their full dotted path.
///
/// `serde(deny_unknown_fields)` covers plain structs but is silently
/// ignored inside internally tagged enums (the `kind = ...` tables), so the
/// reliable check is structural: every key in the raw document must also
/// appear when the parsed config is serialized back.
fn reject_unknown_keys(text: &str, cfg: &ExperimentConfig) -> Result<(), ConfigError> {
    let raw: toml::Table = text.parse()?;
    let echoed = toml::Table::try_from(cfg)
        .expect("experiment config serialization cannot fail");
    check_contained(&raw, &echoed, &mut String::new())
}

fn check_contained(
    raw: &toml::Table,
    echoed: &toml::Table,
    path: &mut String,
) -> Result<(), ConfigError> {
    for (key, value) in raw {
        let len = path.len();
        if !path.is_empty() {
            path.push('.');
        }
        path.push_str(key);
        match echoed.get(key) {
            None => {
                return Err(invalid(path, "unknown key"));
            }
            Some(toml::Value::Table(inner)) => {
                if let toml::Value::Table(raw_inner) = value {
                    check_contained(raw_inner, inner, path)?;
                }
            }
            Some(_) => {}
        }
        path.truncate(len);
    }
    Ok(())
}
