//! Stochastic interest rate (Ornstein-Uhlenbeck short rate) with a no-short-
//! selling constraint on thirty stocks. The rate's own Brownian driver makes
//! the market incomplete, so the asset list is augmented with one synthetic
//! completing asset whose position is constrained to zero: the orthant
//! constraint on the real stocks is zero-padded to cover it.
//!
//! Run with: `cargo run --release --example vasicek_market`

use deep_smp::constraints::ConstraintSet;
use deep_smp::market::{
    DiagProfile, MarketModel, OuRate, SineDrifts, VasicekParams, VolMatrix,
};
use deep_smp::optim::PiecewiseSchedule;
use deep_smp::solver::primal::{PrimalConfig, PrimalSolver};
use deep_smp::utility::Utility;

fn main() {
    let stocks = 30;
    let market = MarketModel::VasicekAugmented(VasicekParams {
        stocks,
        rate: OuRate { initial: 0.05, reversion: 5.0, long_run: 0.05, vol: 0.05 },
        drifts: SineDrifts { base: 0.06, amplitude: 0.01, phase_divisor: 15.0 },
        vol: VolMatrix { diag: DiagProfile::InverseDecay { scale: 0.3 }, off_diag: 0.05 },
    });
    // 30 real stocks in the orthant + 1 completing asset pinned to zero.
    let constraint = ConstraintSet::zero_padded(ConstraintSet::non_neg_orthant(stocks), 1);
    assert_eq!(constraint.dim(), market.total_dim());

    let cfg = PrimalConfig {
        x0: 10.0,
        horizon: 0.5,
        n_time_steps: 20,
        batch_size: 64,
        n_mc: 20_000,
        eval_every: 500,
        total_steps: 2_000,
        epochs: None,
        bn_epsilon: 100.0,
        lr_bsde: PiecewiseSchedule::new(vec![300, 1200], vec![1e-2, 1e-3, 1e-4]),
        lr_control: PiecewiseSchedule::new(vec![300, 1200], vec![1e-3, 1e-4, 1e-5]),
        seed: 1,
        architecture: Default::default(),
        init: Default::default(),
    };
    let mut solver = PrimalSolver::new(cfg, market, Utility::Log, constraint)
        .expect("valid config");

    println!("training primal solver on the stochastic-rate market...");
    let history = solver
        .train(|rec| {
            println!(
                "  step {:>5}: V_l {:.6} ± {:.6}, V_u {:.6} ± {:.6}",
                rec.step,
                rec.bounds.lower,
                rec.bounds.lower_stderr,
                rec.bounds.upper,
                rec.bounds.upper_stderr
            );
        })
        .expect("training stays finite");

    let last = history.bounds.last().unwrap().bounds;
    println!("final: V_l {:.6}, V_u {:.6}, gap {:.1e}",
        last.lower, last.upper, last.upper - last.lower);
}
