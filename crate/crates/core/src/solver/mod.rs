//! Shared plumbing for the primal and dual deep SMP solvers: training
//! history records, Monte-Carlo bound estimates, noise-stream scheduling,
//! and shard-level statistics.

pub mod dual;
pub mod primal;

use crate::optim::StepOutcome;

/// Monte-Carlo evaluation shard size. Bounds are estimated over `n_mc`
/// trajectories simulated in shards of at most this many paths, each shard a
/// pure function of its noise substream; results are reduced in shard order.
pub const MC_SHARD: usize = 5_000;

/// Noise substreams: training batches live below this base, evaluation
/// shards above it, so the two never collide.
const EVAL_STREAM_BASE: u64 = 1 << 32;

/// Maximum shards per evaluation (ample for n_mc up to MC_SHARD * 4096).
const MAX_SHARDS_PER_EVAL: u64 = 4_096;

/// Abort threshold: this many consecutive non-finite BSDE losses ends the
/// run (the skip-and-flag policy keeps parameters clean, but a run that can
/// no longer produce a finite loss will not recover).
pub(crate) const MAX_CONSECUTIVE_NON_FINITE: usize = 25;

/// Substream of the training batch for a 0-based step index. In epoch mode
/// the index wraps at `per_epoch`, so the same batches recur in the same
/// order every epoch; otherwise every step draws a fresh stream.
pub(crate) fn training_stream(step_index: usize, per_epoch: usize) -> u64 {
    (step_index % per_epoch.max(1)) as u64
}

/// Substream of one Monte-Carlo evaluation shard. Distinct evaluations use
/// distinct stream blocks, so every bound estimate is independent of the
/// training draws and of other evaluations.
pub(crate) fn eval_stream(eval_ordinal: u64, shard: u64) -> u64 {
    assert!(shard < MAX_SHARDS_PER_EVAL, "evaluation shard index out of range");
    EVAL_STREAM_BASE + eval_ordinal * MAX_SHARDS_PER_EVAL + shard
}

/// Shard row counts for an `n_mc`-path evaluation.
pub(crate) fn shard_sizes(n_mc: usize) -> Vec<usize> {
    assert!(n_mc >= 1, "n_mc must be at least 1");
    let full = n_mc / MC_SHARD;
    let rem = n_mc % MC_SHARD;
    let mut sizes = vec![MC_SHARD; full];
    if rem > 0 {
        sizes.push(rem);
    }
    sizes
}

/// Streaming mean/variance accumulator (sum-based; merged across shards in
/// fixed order so the reduction is deterministic).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub(crate) struct RunningStat {
    pub n: f64,
    pub sum: f64,
    pub sumsq: f64,
}

impl RunningStat {
    pub fn add(&mut self, x: f64) {
        self.n += 1.0;
        self.sum += x;
        self.sumsq += x * x;
    }

    pub fn merge(&mut self, other: &RunningStat) {
        self.n += other.n;
        self.sum += other.sum;
        self.sumsq += other.sumsq;
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.n
    }

    /// Standard error of the mean.
    pub fn stderr(&self) -> f64 {
        if self.n < 2.0 {
            return f64::INFINITY;
        }
        let mean = self.mean();
        let var = ((self.sumsq - self.n * mean * mean) / (self.n - 1.0)).max(0.0);
        (var / self.n).sqrt()
    }
}

/// A two-sided Monte-Carlo bound estimate with its standard errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundsEstimate {
    pub lower: f64,
    pub lower_stderr: f64,
    pub upper: f64,
    pub upper_stderr: f64,
    /// Rows whose out-of-domain terminal value was guarded to 0 inside the
    /// upper-bound mean (conjugate utility evaluated outside y > 0).
    pub guarded_rows: usize,
    /// Rows dropped entirely from the lower bound (the dual candidate
    /// control is undefined where its adjoint denominator vanishes).
    pub dropped_rows: usize,
}

/// Per-step scalar record: p₀ for the primal solver, y for the dual one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub seconds: f64,
    pub value: f64,
}

/// One bound evaluation, tagged with the training step it followed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundsRecord {
    pub step: usize,
    pub bounds: BoundsEstimate,
}

/// Everything a training run emits: one row per step plus one bounds row per
/// evaluation point.
#[derive(Clone, Debug, Default)]
pub struct TrainingHistory {
    pub steps: Vec<StepRecord>,
    pub bounds: Vec<BoundsRecord>,
}

/// Diagnostics of one two-substep training step.
#[derive(Clone, Debug)]
pub struct StepDiagnostics {
    /// Terminal-condition loss before the optimizer update.
    pub loss_bsde: f64,
    /// Control losses, one per time point, in sweep order.
    pub control_losses: Vec<f64>,
    /// Whether the BSDE-group update was applied or skipped.
    pub bsde_outcome: StepOutcome,
}

/// Unrecoverable training failure.
#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(
        "training produced {consecutive} consecutive non-finite losses by step {step}; \
         the run cannot recover — raising bn_epsilon usually fixes this"
    )]
    NonFinite { step: usize, consecutive: usize },
}
