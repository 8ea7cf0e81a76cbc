//! Weak duality, checked by brute force: for ANY admissible portfolio π and
//! ANY dual pair (y, v) — none of them optimal — the primal objective is
//! bounded by the dual one:
//!
//!     E[U(X_N^π)]  ≤  E[Ũ(Y_N^{y,v})] + x₀·y,
//!
//! where X is the wealth process under π, Y the dual state started at y and
//! steered by v, and Ũ the Fenchel conjugate of U. This inequality is what
//! makes the trained bounds trustworthy, so it had better hold for random
//! non-optimal choices too.
//!
//! Both processes are simulated on the SAME noise so the comparison is
//! tight, using the per-step exponential solutions (exact in distribution
//! for controls held constant over a step, and keeping Y positive by
//! construction), so any violation beyond Monte-Carlo noise would expose a
//! genuine defect rather than discretization slack.
//!
//! Run with: `cargo run --release --example weak_duality`

use deep_smp::constraints::ConstraintSet;
use deep_smp::diffcore::{Mat, Tape};
use deep_smp::market::{
    sample_noise, DeterministicSineParams, DiagProfile, MarketModel, RateCurve, SineDrifts,
    VolMatrix,
};
use deep_smp::utility::Utility;
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn main() {
    let stocks = 30;
    let kappa = 1.0 / stocks as f64;
    let market = MarketModel::DeterministicSine(DeterministicSineParams {
        stocks,
        rate: RateCurve { level: 0.06, growth: 0.5 },
        drifts: SineDrifts { base: 0.07, amplitude: 0.02, phase_divisor: 15.0 },
        vol: VolMatrix { diag: DiagProfile::SqrtRamp { scale: 0.3 }, off_diag: 0.1 },
    });
    let constraint = ConstraintSet::floor_box(kappa, stocks);
    let utility = Utility::Log;

    let x0: f64 = 10.0;
    let horizon = 0.5;
    let n_steps = 10;
    let dt = horizon / n_steps as f64;
    let batch = 20_000;
    let m = market.total_dim();

    // One shared noise batch for every trial and for both sides of each.
    let noise = sample_noise(0, 777, batch, m, n_steps, dt);

    let mut rng = ChaCha12Rng::seed_from_u64(42);
    println!("{:>5}  {:>12}  {:>12}  {:>10}  {:>8}", "trial", "primal", "dual", "slack", "slack/SE");

    for trial in 0..5 {
        // A random constant-in-time admissible portfolio near sane
        // allocations (so the two sides land close and the check is tight)...
        let pi: Vec<f64> = (0..m).map(|_| rng.gen_range(-kappa..3.0 / m as f64)).collect();
        assert!(constraint.contains(&pi));
        // ...and a random dual pair: y > 0, v in the support function's domain.
        let y0: f64 = rng.gen_range(0.05..0.2);
        let v: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..0.05)).collect();
        let delta = constraint
            .support_delta(&v)
            .finite()
            .expect("v drawn inside the dual domain");

        let pi_row = Mat::from_shape_fn((1, m), |(_, j)| pi[j]);
        let v_row = Mat::from_shape_fn((1, m), |(_, j)| v[j]);

        let mut log_x = Array1::from_elem(batch, x0.ln());
        let mut log_y = Array1::from_elem(batch, y0.ln());
        let aux = market.init_aux(1);
        for i in 0..n_steps {
            let t_i = i as f64 * dt;
            let coeffs = market.coefficients(&aux, t_i);
            let r = coeffs.rate_mat(1)[(0, 0)];
            let theta = coeffs.theta_mat(1).row(0).to_owned();
            let pi_sigma = coeffs.pi_sigma_mat(&pi_row).row(0).to_owned();
            let sigma_inv_v = {
                let mut t = Tape::new();
                let v_c = t.constant(v_row.clone());
                let sv = coeffs.sigma_inv_vec(&mut t, v_c);
                t.value(sv).row(0).to_owned()
            };
            let psi = &theta + &sigma_inv_v;

            let x_drift = (r + pi_sigma.dot(&theta) - 0.5 * pi_sigma.dot(&pi_sigma)) * dt;
            let y_drift = -(r + delta + 0.5 * psi.dot(&psi)) * dt;
            log_x += x_drift;
            log_y += y_drift;
            log_x += &noise.steps[i].dot(&pi_sigma);
            log_y -= &noise.steps[i].dot(&psi);
        }

        // Sample means and a combined standard error for the slack.
        let (mut pm, mut ps) = (0.0, 0.0);
        let (mut dm, mut ds) = (0.0, 0.0);
        for r in 0..batch {
            let u = utility.u(log_x[r].exp());
            let f = utility.fenchel(log_y[r].exp());
            pm += u;
            ps += u * u;
            dm += f;
            ds += f * f;
        }
        let nb = batch as f64;
        pm /= nb;
        dm /= nb;
        let p_se = ((ps / nb - pm * pm) / nb).sqrt();
        let d_se = ((ds / nb - dm * dm) / nb).sqrt();
        let primal = pm;
        let dual = dm + x0 * y0;
        let slack = dual - primal;
        let se = (p_se * p_se + d_se * d_se).sqrt();
        println!("{trial:>5}  {primal:>12.6}  {dual:>12.6}  {slack:>10.6}  {:>8.1}", slack / se);
        assert!(slack >= -3.0 * se, "weak duality violated beyond noise");
    }
    println!("\nevery random dual pair dominated every random portfolio, as it must.");
}
