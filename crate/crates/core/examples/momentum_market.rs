//! A genuinely path-dependent problem: each stock's drift is high while the
//! stock sits above its running historical average and low otherwise, so no
//! Markovian state smaller than the whole path determines the coefficients.
//! Methods needing Markovian structure are out; the stochastic-maximum-
//! principle formulation is not. With no closed form available, the primal
//! and dual solvers cross-validate each other on the same problem.
//!
//! Run with: `cargo run --release --example momentum_market`

use deep_smp::constraints::ConstraintSet;
use deep_smp::market::{DiagProfile, MarketModel, PathMomentumParams, VolMatrix};
use deep_smp::optim::PiecewiseSchedule;
use deep_smp::solver::dual::{DualConfig, DualSolver};
use deep_smp::solver::primal::{PrimalConfig, PrimalSolver};
use deep_smp::utility::Utility;

fn main() {
    let market = MarketModel::PathMomentum(PathMomentumParams {
        stocks: 5,
        rate: 0.1,
        drift_high: 0.12,
        drift_low: 0.08,
        vol: VolMatrix { diag: DiagProfile::Constant { scale: 0.2 }, off_diag: 0.05 },
        trapezoid_average: false,
    });
    let constraint = ConstraintSet::full_space(5);
    let utility = Utility::power(0.5);

    let lr_fast = PiecewiseSchedule::new(vec![300, 1200], vec![1e-2, 1e-3, 1e-4]);
    let lr_slow = PiecewiseSchedule::new(vec![300, 1200], vec![1e-3, 1e-4, 1e-5]);

    let primal_cfg = PrimalConfig {
        x0: 1.0,
        horizon: 0.5,
        n_time_steps: 10,
        batch_size: 64,
        n_mc: 20_000,
        eval_every: 500,
        total_steps: 2_000,
        epochs: None,
        bn_epsilon: 100.0,
        lr_bsde: lr_fast.clone(),
        lr_control: lr_slow,
        seed: 1,
        architecture: Default::default(),
        init: Default::default(),
    };
    let mut primal =
        PrimalSolver::new(primal_cfg, market.clone(), utility, constraint.clone())
            .expect("valid config");
    let primal_history = primal.train(|_| {}).expect("training stays finite");
    let pb = primal_history.bounds.last().unwrap().bounds;
    println!("primal: V_l      {:.6} ± {:.6}, V_u      {:.6} ± {:.6}",
        pb.lower, pb.lower_stderr, pb.upper, pb.upper_stderr);

    let dual_cfg = DualConfig {
        x0: 1.0,
        horizon: 0.5,
        n_time_steps: 10,
        batch_size: 64,
        n_mc: 20_000,
        eval_every: 500,
        total_steps: 2_000,
        epochs: None,
        bn_epsilon: 100.0,
        lr_bsde: lr_fast.clone(),
        lr_control: lr_fast.clone(),
        lr_y: lr_fast,
        seed: 1,
        architecture: Default::default(),
        init: Default::default(),
    };
    let mut dual =
        DualSolver::new(dual_cfg, market, utility, constraint).expect("valid config");
    let dual_history = dual.train(|_| {}).expect("training stays finite");
    let db = dual_history.bounds.last().unwrap().bounds;
    println!("dual:   Vtilde_l {:.6} ± {:.6}, Vtilde_u {:.6} ± {:.6}",
        db.lower, db.lower_stderr, db.upper, db.upper_stderr);

    println!(
        "cross-solver agreement |Vtilde_l - V_l| = {:.1e}",
        (db.lower - pb.lower).abs()
    );
}
