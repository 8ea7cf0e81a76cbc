//! Architecture variants: feeding each time step's network the previous
//! step's output.
//!
//! The baseline uses one independent feed-forward head per time step. The
//! semi-recurrent variants additionally hand head i the previous head's
//! output — the control π_{i−1} for the control heads, q_{i−1} for the
//! integrand heads — which gives the network a hint that the optimal
//! control varies slowly in time. All four on/off combinations are trained
//! at desk scale on the same benchmark problem.
//!
//! Run with: `cargo run --release --example semi_recurrent`

use deep_smp::constraints::ConstraintSet;
use deep_smp::market::{DeterministicSineParams, DiagProfile, MarketModel, RateCurve, SineDrifts, VolMatrix};
use deep_smp::optim::PiecewiseSchedule;
use deep_smp::solver::primal::{PrimalArchitecture, PrimalConfig, PrimalSolver};
use deep_smp::utility::Utility;

fn run(architecture: PrimalArchitecture) -> (f64, f64) {
    let stocks = 30;
    let market = MarketModel::DeterministicSine(DeterministicSineParams {
        stocks,
        rate: RateCurve { level: 0.06, growth: 0.5 },
        drifts: SineDrifts { base: 0.07, amplitude: 0.02, phase_divisor: 15.0 },
        vol: VolMatrix { diag: DiagProfile::SqrtRamp { scale: 0.3 }, off_diag: 0.1 },
    });
    let constraint = ConstraintSet::floor_box(1.0 / stocks as f64, stocks);
    let cfg = PrimalConfig {
        x0: 10.0,
        horizon: 0.5,
        n_time_steps: 10,
        batch_size: 64,
        n_mc: 20_000,
        eval_every: 1_500,
        total_steps: 1_500,
        epochs: None,
        bn_epsilon: 100.0,
        lr_bsde: PiecewiseSchedule::new(vec![1_000], vec![1e-2, 1e-3]),
        lr_control: PiecewiseSchedule::new(vec![1_000], vec![1e-3, 1e-4]),
        seed: 1,
        architecture,
        init: Default::default(),
    };
    let mut solver = PrimalSolver::new(cfg, market, Utility::Log, constraint)
        .expect("valid config");
    let history = solver.train(|_| {}).expect("training stays finite");
    let last = history.bounds.last().unwrap().bounds;
    (last.lower, last.upper)
}

fn main() {
    println!("benchmark value 2.34335; 1500 steps each:\n");
    for (label, pi, q) in [
        ("feed-forward heads (baseline)", false, false),
        ("recurrent control heads", true, false),
        ("recurrent integrand heads", false, true),
        ("both recurrent", true, true),
    ] {
        let arch = PrimalArchitecture { semi_recurrent_pi: pi, semi_recurrent_q: q, extra_q_input: false };
        let (lower, upper) = run(arch);
        println!("{label:<32} V_l {lower:.6}  V_u {upper:.6}");
    }
}
