//! Finite-difference verification of every reverse-mode gradient the solvers
//! rely on: dense layers, batch norm, the network heads, the utility and
//! constraint functions on tape, and full end-to-end losses.
//!
//! Run with: `cargo run --release --example gradient_check`

use deep_smp::nn::{gradient_suite, gradient_suite_max_error};

const TOLERANCE: f64 = 1e-4;

fn main() {
    let entries = gradient_suite(0);
    let width = entries.iter().map(|e| e.name.len()).max().unwrap_or(0);
    for entry in &entries {
        let verdict = if entry.error <= TOLERANCE { "ok" } else { "FAIL" };
        println!("{:<width$}  {:>10.3e}  {verdict}", entry.name, entry.error);
    }
    let max = gradient_suite_max_error(0);
    println!(
        "\nmax relative error {max:.3e} over {} cases (tolerance {TOLERANCE:.0e})",
        entries.len()
    );
    assert!(max <= TOLERANCE, "gradient check failed");
}
