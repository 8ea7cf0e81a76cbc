//! Trains the dual-side solver on the constrained 30-stock log-utility
//! market. The dual produces its own pair of bounds: Ṽ_l from simulating
//! the candidate portfolio recovered out of the dual adjoint, and Ṽ_u from
//! the dual objective E[Ũ(Y_N)] + x₀·y.
//!
//! On constrained problems the trained dual control tends to collapse to
//! zero because the integrand networks never see the control, so Ṽ_u
//! typically drifts toward the unconstrained value while Ṽ_l stays sharp —
//! visible here against the two oracle values.
//!
//! Run with: `cargo run --release --example dual_bounds`

use deep_smp::constraints::ConstraintSet;
use deep_smp::market::{
    DeterministicSineParams, DiagProfile, MarketModel, RateCurve, SineDrifts, VolMatrix,
};
use deep_smp::optim::PiecewiseSchedule;
use deep_smp::oracle::{log_dual_value, OracleConfig};
use deep_smp::solver::dual::{DualConfig, DualSolver};
use deep_smp::utility::Utility;

fn main() {
    let market = MarketModel::DeterministicSine(DeterministicSineParams {
        stocks: 30,
        rate: RateCurve { level: 0.06, growth: 0.5 },
        drifts: SineDrifts { base: 0.07, amplitude: 0.02, phase_divisor: 15.0 },
        vol: VolMatrix { diag: DiagProfile::SqrtRamp { scale: 0.3 }, off_diag: 0.1 },
    });
    let constrained = ConstraintSet::floor_box(1.0 / 30.0, 30);
    let unconstrained = ConstraintSet::full_space(30);

    let constrained_value =
        log_dual_value(&OracleConfig::new(market.clone(), constrained.clone(), 10.0, 0.5))
            .expect("oracle converges")
            .value;
    let unconstrained_value =
        log_dual_value(&OracleConfig::new(market.clone(), unconstrained, 10.0, 0.5))
            .expect("oracle converges")
            .value;
    println!("constrained benchmark:   {constrained_value:.6}");
    println!("unconstrained benchmark: {unconstrained_value:.6}");

    let cfg = DualConfig {
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
        lr_control: PiecewiseSchedule::new(vec![1000], vec![1e-2, 1e-3]),
        lr_y: PiecewiseSchedule::new(vec![200, 1000], vec![1e-2, 1e-4, 1e-5]),
        seed: 1,
        architecture: Default::default(),
        init: Default::default(),
    };
    let mut solver =
        DualSolver::new(cfg, market, Utility::log(), constrained).expect("valid config");

    let history = solver
        .train(|rec| {
            println!(
                "step {:>5}: Vtilde_l {:.6} ± {:.6}, Vtilde_u {:.6} ± {:.6}",
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
        "final: Vtilde_l {:.6} (vs constrained {:.6}), Vtilde_u {:.6} (vs unconstrained {:.6}), y {:.4}",
        last.lower,
        constrained_value,
        last.upper,
        unconstrained_value,
        solver.y_value()
    );
}
