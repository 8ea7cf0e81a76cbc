//! Trains the primal solver on the stochastic-volatility market: one traded
//! stock whose variance follows a square-root diffusion, completed with an
//! artificial second stock pinned to portfolio weight zero. The integrand
//! networks receive the current volatility √ν as an extra input — without
//! it they would have to guess the variance state from wealth alone.
//!
//! The closed-form value for this horizon is 2.02225; a desk-scale run gets
//! within a few 1e-3 of it.
//!
//! Run with: `cargo run --release --example heston_market`

use deep_smp::constraints::ConstraintSet;
use deep_smp::market::{HestonParams, MarketModel};
use deep_smp::optim::PiecewiseSchedule;
use deep_smp::solver::primal::{PrimalArchitecture, PrimalConfig, PrimalSolver};
use deep_smp::utility::Utility;

fn main() {
    let market = MarketModel::HestonAugmented(HestonParams {
        rate: 0.05,
        excess_scale: 0.5,
        reversion: 10.0,
        long_run_variance: 0.05,
        vol_of_vol: 0.5,
        correlation: -0.5,
        initial_variance: 0.5,
        variance_floor: 1e-5,
    });
    let constraint = ConstraintSet::zero_padded(ConstraintSet::full_space(1), 1);

    let cfg = PrimalConfig {
        x0: 1.0,
        horizon: 0.2,
        n_time_steps: 6,
        batch_size: 64,
        n_mc: 20_000,
        eval_every: 300,
        total_steps: 1_500,
        epochs: None,
        bn_epsilon: 1.0,
        lr_bsde: PiecewiseSchedule::new(vec![200, 1000], vec![1e-2, 1e-3, 1e-4]),
        lr_control: PiecewiseSchedule::new(vec![200, 1000], vec![1e-3, 1e-4, 1e-5]),
        seed: 1,
        architecture: PrimalArchitecture { extra_q_input: true, ..Default::default() },
        init: Default::default(),
    };
    let mut solver = PrimalSolver::new(cfg, market, Utility::power(0.5), constraint)
        .expect("valid config");

    println!("closed-form benchmark: 2.02225");
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
        "final: bounds [{:.6}, {:.6}], benchmark 2.02225",
        last.lower, last.upper
    );
}
