//! Terminal utility functions and their convex-duality companions.
//!
//! Two families are supported: logarithmic utility and power (CRRA) utility
//! `x^p / p` with exponent `p` in `(0, 1)`. For each the module exposes
//!
//! - `u`, `u_prime` — the utility and its marginal, **guarded**: both return
//!   0 for non-positive wealth so Monte-Carlo batches that momentarily leave
//!   the domain cannot inject NaN into a loss;
//! - `inverse_marginal`, `fenchel`, `fenchel_prime` — `(U')^{-1}`, the
//!   Legendre–Fenchel transform `sup_x (U(x) - xy)`, and its derivative.
//!   These are **strict**: they panic on `y <= 0`, where the transform is
//!   genuinely undefined, because a silent fallback there would corrupt dual
//!   bound estimates rather than fail fast;
//! - `*_on_tape` variants that build the same functions out of guarded
//!   primitives so gradients can flow through them during training.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, ValueRef};

/// A terminal utility function on wealth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Utility {
    /// U(x) = ln x.
    Log,
    /// U(x) = x^p / p with 0 < p < 1.
    Power { exponent: f64 },
}

impl Utility {
    pub fn log() -> Self {
        Utility::Log
    }

    pub fn power(exponent: f64) -> Self {
        assert!(
            exponent > 0.0 && exponent < 1.0,
            "power utility exponent must lie in (0, 1), got {exponent}"
        );
        Utility::Power { exponent }
    }

    /// Validates parameters coming from a deserialized config.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            Utility::Log => Ok(()),
            Utility::Power { exponent } => {
                if *exponent > 0.0 && *exponent < 1.0 {
                    Ok(())
                } else {
                    Err(format!("power utility exponent must lie in (0, 1), got {exponent}"))
                }
            }
        }
    }

    /// U(x), guarded: 0 for x <= 0.
    pub fn u(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        match self {
            Utility::Log => x.ln(),
            Utility::Power { exponent } => x.powf(*exponent) / exponent,
        }
    }

    /// U'(x), guarded: 0 for x <= 0.
    pub fn u_prime(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        match self {
            Utility::Log => 1.0 / x,
            Utility::Power { exponent } => x.powf(exponent - 1.0),
        }
    }

    fn require_positive(y: f64, what: &str) {
        assert!(y > 0.0, "{what} is only defined for positive arguments, got {y}");
    }

    /// (U')^{-1}(y). Strict: panics for y <= 0.
    pub fn inverse_marginal(&self, y: f64) -> f64 {
        Self::require_positive(y, "inverse_marginal");
        match self {
            Utility::Log => 1.0 / y,
            Utility::Power { exponent } => y.powf(1.0 / (exponent - 1.0)),
        }
    }

    /// Legendre–Fenchel transform Ũ(y) = sup_{x>0} (U(x) - xy).
    /// Strict: panics for y <= 0.
    pub fn fenchel(&self, y: f64) -> f64 {
        Self::require_positive(y, "fenchel");
        match self {
            Utility::Log => -y.ln() - 1.0,
            Utility::Power { exponent } => {
                let p = *exponent;
                (1.0 - p) / p * y.powf(p / (p - 1.0))
            }
        }
    }

    /// Ũ'(y). Strict: panics for y <= 0. Satisfies Ũ'(y) = -(U')^{-1}(y).
    pub fn fenchel_prime(&self, y: f64) -> f64 {
        Self::require_positive(y, "fenchel_prime");
        match self {
            Utility::Log => -1.0 / y,
            Utility::Power { exponent } => -y.powf(1.0 / (exponent - 1.0)),
        }
    }

    /// U applied elementwise on the tape, guarded like [`Utility::u`].
    pub fn u_on_tape(&self, t: &mut Tape, x: ValueRef) -> ValueRef {
        match self {
            Utility::Log => t.guarded_log(x),
            Utility::Power { exponent } => {
                let pw = t.guarded_pow(x, *exponent);
                t.scale(pw, 1.0 / exponent)
            }
        }
    }

    /// U' applied elementwise on the tape, guarded like [`Utility::u_prime`].
    pub fn u_prime_on_tape(&self, t: &mut Tape, x: ValueRef) -> ValueRef {
        match self {
            Utility::Log => {
                // 1/x through a guard: divide by a value clamped away from
                // zero first so the division itself never produces NaN, then
                // mask the out-of-domain entries to exactly zero.
                let one = t.scalar(1.0);
                let safe = t.select_where(x, x, one);
                let inv = t.div(one, safe);
                let zero = t.scalar(0.0);
                t.select_where(x, inv, zero)
            }
            Utility::Power { exponent } => t.guarded_pow(x, exponent - 1.0),
        }
    }

    /// Ũ applied elementwise on the tape. Out-of-domain entries (y <= 0)
    /// evaluate to 0 with zero gradient, mirroring the guards on the primal
    /// side; the strict scalar [`Utility::fenchel`] remains the authority
    /// where a hard failure is wanted.
    pub fn fenchel_on_tape(&self, t: &mut Tape, y: ValueRef) -> ValueRef {
        match self {
            Utility::Log => {
                let lg = t.guarded_log(y);
                let neg = t.scale(lg, -1.0);
                let val = t.add_scalar(neg, -1.0);
                let zero = t.scalar(0.0);
                t.select_where(y, val, zero)
            }
            Utility::Power { exponent } => {
                let p = *exponent;
                let pw = t.guarded_pow(y, p / (p - 1.0));
                t.scale(pw, (1.0 - p) / p)
            }
        }
    }

    /// Ũ' applied elementwise on the tape, guarded to 0 outside y > 0 like
    /// the other Monte-Carlo tape maps.
    pub fn fenchel_prime_on_tape(&self, t: &mut Tape, y: ValueRef) -> ValueRef {
        match self {
            Utility::Log => {
                let prime = self.u_prime_on_tape(t, y); // guarded 1/y
                t.scale(prime, -1.0)
            }
            Utility::Power { exponent } => {
                let pw = t.guarded_pow(y, 1.0 / (exponent - 1.0));
                t.scale(pw, -1.0)
            }
        }
    }
}
