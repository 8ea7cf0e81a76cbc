//! Scratch diagnostic (not part of the suite): watches the dual solver's
//! internals on the benchmark problem. Run with
//! `cargo test --test scratch_probe -- --nocapture --ignored`.

use deep_smp::config::ExperimentConfig;
use deep_smp::diffcore::{Mat, Tape};
use deep_smp::market::sample_noise;
use deep_smp::nn::Mode;
use deep_smp::solver::dual::DualSolver;
use std::path::Path;

#[test]
#[ignore]
fn probe_dual_training_internals() {
    let cfg = ExperimentConfig::load(Path::new(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../configs/log_floor_box.toml"
    )))
    .unwrap();
    let dual_cfg = cfg.dual_config().expect("dual section");
    let market = cfg.market.clone();
    let m = market.total_dim();

    // --- static geometry: sigma inverse amplification at t = 0 ---
    let aux = market.init_aux(1);
    let coeffs = market.coefficients(&aux, 0.0);
    let theta = coeffs.theta_mat(1);
    println!("|theta(0)| = {:.4}", theta.row(0).dot(&theta.row(0)).sqrt());
    // columns of sigma^{-1}: feed unit vectors through sigma_inv_vec
    let mut max_col_norm: f64 = 0.0;
    for j in 0..m {
        let mut t = Tape::new();
        let mut e = Mat::zeros((1, m));
        e[(0, j)] = 1.0;
        let e_c = t.constant(e);
        let sv = coeffs.sigma_inv_vec(&mut t, e_c);
        let row = t.value(sv);
        let norm = row.row(0).dot(&row.row(0)).sqrt();
        max_col_norm = max_col_norm.max(norm);
        if j < 3 || j == m - 1 {
            println!("  |sigma^-1 e_{j}| = {norm:.3}");
        }
    }
    println!("max_j |sigma^-1 e_j| = {max_col_norm:.3}");

    // --- training probe ---
    let mut solver =
        DualSolver::new(dual_cfg.clone(), market, cfg.utility, cfg.constraint.clone()).unwrap();
    let n = dual_cfg.n_time_steps;
    let dt = dual_cfg.horizon / n as f64;

    let probe = |solver: &mut DualSolver, label: &str| {
        let noise = sample_noise(999, 0, 2000, m, n, dt);
        let mut t = Tape::new();
        let sim = solver.dual_forward(&mut t, &noise, Mode::Inference);
        let y_n = t.value(sim.y[n]).clone();
        let neg = y_n.iter().filter(|&&y| y <= 0.0).count();
        let pos_mean_log: f64 = {
            let v: Vec<f64> = y_n.iter().filter(|&&y| y > 0.0).map(|&y| y.ln()).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        };
        let p2_n = t.value(sim.p2[n]).clone();
        let p2_mean = p2_n.mean().unwrap();
        let mut v_norms = Vec::new();
        let mut q_norms = Vec::new();
        for i in 0..n {
            let v = t.value(sim.v[i]);
            let q = t.value(sim.q2[i]);
            let vn = (v.mapv(|x| x * x).sum() / v.nrows() as f64).sqrt();
            let qn = (q.mapv(|x| x * x).sum() / q.nrows() as f64).sqrt();
            v_norms.push(vn);
            q_norms.push(qn);
        }
        println!(
            "{label}: y {:.4}  negY {:.3}  E[lnY|pos] {:.2}  p2_N {:.3}  |v| [{:.3} .. {:.3}]  |q2| [{:.3} .. {:.3}]",
            solver.y_value(),
            neg as f64 / y_n.len() as f64,
            pos_mean_log,
            p2_mean,
            v_norms.iter().cloned().fold(f64::INFINITY, f64::min),
            v_norms.iter().cloned().fold(0.0f64, f64::max),
            q_norms.iter().cloned().fold(f64::INFINITY, f64::min),
            q_norms.iter().cloned().fold(0.0f64, f64::max),
        );
    };

    probe(&mut solver, "init      ");
    let mut rng_stream = 1u64;
    for chunk in 0..10 {
        for _ in 0..100 {
            let noise = sample_noise(
                dual_cfg.seed,
                10_000 + rng_stream,
                dual_cfg.batch_size,
                m,
                n,
                dt,
            );
            rng_stream += 1;
            solver.training_step(&noise);
        }
        probe(&mut solver, &format!("step {:5}", (chunk + 1) * 100));
    }
}
