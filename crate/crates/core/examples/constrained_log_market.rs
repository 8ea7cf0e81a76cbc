//! Trains the primal solver on a 30-stock market with log utility and a
//! short-selling floor, then compares the Monte-Carlo value bounds against
//! the deterministic oracle. Desk-scale: ~1500 steps instead of the 10000
//! a full benchmark run uses.
//!
//! Run with: `cargo run --release --example constrained_log_market`

use deep_smp::constraints::ConstraintSet;
use deep_smp::market::{
    DeterministicSineParams, DiagProfile, MarketModel, RateCurve, SineDrifts, VolMatrix,
};
use deep_smp::optim::PiecewiseSchedule;
use deep_smp::oracle::{log_dual_value, OracleConfig};
use deep_smp::solver::primal::{PrimalConfig, PrimalSolver};
use deep_smp::utility::Utility;

fn main() {
    let market = MarketModel::DeterministicSine(DeterministicSineParams {
        stocks: 30,
        rate: RateCurve { level: 0.06, growth: 0.5 },
        drifts: SineDrifts { base: 0.07, amplitude: 0.02, phase_divisor: 15.0 },
        vol: VolMatrix { diag: DiagProfile::SqrtRamp { scale: 0.3 }, off_diag: 0.1 },
    });
    let constraint = ConstraintSet::floor_box(1.0 / 30.0, 30);

    let oracle_cfg = OracleConfig::new(market.clone(), constraint.clone(), 10.0, 0.5);
    let oracle = log_dual_value(&oracle_cfg).expect("oracle converges on this market");
    println!("oracle benchmark: {:.6}", oracle.value);

    let cfg = PrimalConfig {
        x0: 10.0,
        horizon: 0.5,
        n_time_steps: 10,
        batch_size: 64,
        n_mc: 20_000,
        eval_every: 300,
        total_steps: 1_500,
        epochs: None,
        bn_epsilon: 100.0,
        lr_bsde: PiecewiseSchedule::new(vec![1000], vec![1e-2, 1e-3]),
        lr_control: PiecewiseSchedule::new(vec![1000], vec![1e-3, 1e-4]),
        seed: 1,
        architecture: Default::default(),
        init: Default::default(),
    };
    let mut solver =
        PrimalSolver::new(cfg, market, Utility::log(), constraint).expect("valid config");

    let history = solver
        .train(|rec| {
            println!(
                "step {:>5}: V_l {:.6} ± {:.6}, V_u {:.6} ± {:.6}",
                rec.step,
                rec.bounds.lower,
                rec.bounds.lower_stderr,
                rec.bounds.upper,
                rec.bounds.upper_stderr
            );
        })
        .expect("training stays finite");

    let last = history.bounds.last().unwrap().bounds;
    println!(
        "final: bounds [{:.6}, {:.6}] vs oracle {:.6} (gap {:.1e}, p0 {:.4})",
        last.lower,
        last.upper,
        oracle.value,
        (last.upper - last.lower).abs(),
        solver.p0_value()
    );
}
