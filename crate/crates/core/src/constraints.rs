//! Closed convex constraint sets for the portfolio process, their support
//! functions, dual domains, and the projection maps used as hard constraints.
//!
//! The primal solver needs, for a set `K`:
//! - an output transform whose image lies in `K` (hard constraint on π-heads);
//! - the componentwise projection `h_K` used when recovering a primal control
//!   from dual quantities.
//!
//! The dual solver needs the support function `δ_K(v) = sup_{π∈K} (−πᵀv)`,
//! its effective domain `K̃` (where δ is finite), and an output transform
//! whose image lies in `K̃` (hard constraint on v-heads).
//!
//! Infinite support values are an explicit enum tag, never a float sentinel,
//! so they cannot silently propagate through arithmetic.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Mat, Tape, ValueRef};
use crate::nn::{OutputTransform, PadFill};

/// Value of a support function: finite or (off the dual domain) infinite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SupportValue {
    Finite(f64),
    Infinite,
}

impl SupportValue {
    pub fn finite(self) -> Option<f64> {
        match self {
            SupportValue::Finite(v) => Some(v),
            SupportValue::Infinite => None,
        }
    }
}

/// Whether a head sits at the initial time point (a plain trainable vector)
/// or at a later one (a full network). The initial FloorBox head uses a
/// post-update clamp instead of a squared reparameterization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadPosition {
    Initial,
    Later,
}

/// Admissible set for the fraction-of-wealth portfolio process. Every
/// variant contains the zero vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintSet {
    /// K = ℝᵐ (unconstrained).
    FullSpace { dim: usize },
    /// K = [0, ∞)ᵐ (no short selling).
    NonNegOrthant { dim: usize },
    /// K = [−κ, ∞)ᵐ with κ > 0 (short selling capped at κ per asset).
    FloorBox { kappa: f64, dim: usize },
    /// K = K_inner × {0}^padded: market-completion coordinates whose
    /// portfolio weight is pinned to zero (artificial stocks).
    ZeroPadded { inner: Box<ConstraintSet>, padded: usize },
}

impl ConstraintSet {
    pub fn full_space(dim: usize) -> Self {
        ConstraintSet::FullSpace { dim }
    }

    pub fn non_neg_orthant(dim: usize) -> Self {
        ConstraintSet::NonNegOrthant { dim }
    }

    pub fn floor_box(kappa: f64, dim: usize) -> Self {
        assert!(kappa > 0.0, "FloorBox needs kappa > 0, got {kappa}");
        ConstraintSet::FloorBox { kappa, dim }
    }

    pub fn zero_padded(inner: ConstraintSet, padded: usize) -> Self {
        assert!(
            !matches!(inner, ConstraintSet::ZeroPadded { .. }),
            "ZeroPadded sets do not nest"
        );
        ConstraintSet::ZeroPadded { inner: Box::new(inner), padded }
    }

    /// Total number of portfolio coordinates, padding included.
    pub fn dim(&self) -> usize {
        match self {
            ConstraintSet::FullSpace { dim }
            | ConstraintSet::NonNegOrthant { dim }
            | ConstraintSet::FloorBox { dim, .. } => *dim,
            ConstraintSet::ZeroPadded { inner, padded } => inner.dim() + padded,
        }
    }

    /// Coordinates genuinely governed by the inner set (= `dim()` unless padded).
    pub fn inner_dim(&self) -> usize {
        match self {
            ConstraintSet::ZeroPadded { inner, .. } => inner.dim(),
            _ => self.dim(),
        }
    }

    /// Validates parameters coming from a deserialized config.
    pub fn validate(&self) -> Result<(), String> {
        if self.dim() == 0 {
            return Err("constraint set dimension must be at least 1".into());
        }
        match self {
            ConstraintSet::FloorBox { kappa, .. } if *kappa <= 0.0 => {
                Err(format!("FloorBox needs kappa > 0, got {kappa}"))
            }
            ConstraintSet::ZeroPadded { inner, padded } => {
                if *padded == 0 {
                    return Err("ZeroPadded needs at least one padded coordinate".into());
                }
                if matches!(**inner, ConstraintSet::ZeroPadded { .. }) {
                    return Err("ZeroPadded sets do not nest".into());
                }
                inner.validate()
            }
            _ => Ok(()),
        }
    }

    /// Membership test for the primal set K (exact inequalities).
    pub fn contains(&self, pi: &[f64]) -> bool {
        assert_eq!(pi.len(), self.dim(), "contains: dimension mismatch");
        match self {
            ConstraintSet::FullSpace { .. } => true,
            ConstraintSet::NonNegOrthant { .. } => pi.iter().all(|&x| x >= 0.0),
            ConstraintSet::FloorBox { kappa, .. } => pi.iter().all(|&x| x >= -kappa),
            ConstraintSet::ZeroPadded { inner, .. } => {
                let k = inner.dim();
                inner.contains(&pi[..k]) && pi[k..].iter().all(|&x| x == 0.0)
            }
        }
    }

    /// Support function δ_K(v) = sup_{π ∈ K} (−πᵀv).
    pub fn support_delta(&self, v: &[f64]) -> SupportValue {
        assert_eq!(v.len(), self.dim(), "support_delta: dimension mismatch");
        match self {
            ConstraintSet::FullSpace { .. } => {
                if v.iter().all(|&x| x == 0.0) {
                    SupportValue::Finite(0.0)
                } else {
                    SupportValue::Infinite
                }
            }
            ConstraintSet::NonNegOrthant { .. } => {
                if v.iter().all(|&x| x >= 0.0) {
                    SupportValue::Finite(0.0)
                } else {
                    SupportValue::Infinite
                }
            }
            ConstraintSet::FloorBox { kappa, .. } => {
                if v.iter().all(|&x| x >= 0.0) {
                    SupportValue::Finite(kappa * v.iter().sum::<f64>())
                } else {
                    SupportValue::Infinite
                }
            }
            ConstraintSet::ZeroPadded { inner, .. } => {
                // Padded π-coordinates are 0, so they contribute nothing to
                // the supremum and the padded v-coordinates are free.
                inner.support_delta(&v[..inner.dim()])
            }
        }
    }

    /// Membership test for the dual domain K̃ = {v : δ_K(v) < ∞}.
    pub fn dual_domain_contains(&self, v: &[f64]) -> bool {
        matches!(self.support_delta(v), SupportValue::Finite(_))
    }

    /// Hard-constraint transform for dual v-heads: image ⊆ K̃.
    pub fn dual_transform(&self) -> OutputTransform {
        match self {
            // K̃ = {0}: the head is forced to the zero constant.
            ConstraintSet::FullSpace { .. } => OutputTransform::Zero,
            // K̃ = nonneg orthant for both orthant-type sets.
            ConstraintSet::NonNegOrthant { .. } | ConstraintSet::FloorBox { .. } => {
                OutputTransform::Square
            }
            // K̃ = K̃_inner × ℝ^padded: padded coordinates are unconstrained.
            ConstraintSet::ZeroPadded { inner, .. } => OutputTransform::Padded {
                inner: Box::new(inner.dual_transform()),
                inner_dim: inner.dim(),
                pad: PadFill::Unconstrained,
            },
        }
    }

    /// Hard-constraint transform for primal π-heads: image ⊆ K.
    pub fn primal_transform(&self, position: HeadPosition) -> OutputTransform {
        match self {
            ConstraintSet::FullSpace { .. } => OutputTransform::Identity,
            ConstraintSet::NonNegOrthant { .. } => OutputTransform::Square,
            ConstraintSet::FloorBox { kappa, .. } => match position {
                // The initial head is a bare trainable vector; clamping the
                // variable after each update preserves more of the gradient
                // signal than squaring would.
                HeadPosition::Initial => OutputTransform::ClampFloor(*kappa),
                HeadPosition::Later => OutputTransform::SquareMinusKappa(*kappa),
            },
            ConstraintSet::ZeroPadded { inner, .. } => OutputTransform::Padded {
                inner: Box::new(inner.primal_transform(position)),
                inner_dim: inner.dim(),
                pad: PadFill::Zeros,
            },
        }
    }

    /// Componentwise projection-style map h_K onto K: max{−κ, x} for
    /// FloorBox, max{0, x} for NonNegOrthant, identity for FullSpace, and 0
    /// on padded coordinates. Applied row by row to a batch.
    pub fn h_k(&self, x: &Mat) -> Mat {
        assert_eq!(x.ncols(), self.dim(), "h_k: dimension mismatch");
        let mut out = x.clone();
        self.h_k_in_place(&mut out);
        out
    }

    fn h_k_in_place(&self, x: &mut Mat) {
        match self {
            ConstraintSet::FullSpace { .. } => {}
            ConstraintSet::NonNegOrthant { .. } => x.mapv_inplace(|v| v.max(0.0)),
            ConstraintSet::FloorBox { kappa, .. } => {
                let floor = -kappa;
                x.mapv_inplace(|v| v.max(floor));
            }
            ConstraintSet::ZeroPadded { inner, .. } => {
                let k = inner.dim();
                for mut row in x.rows_mut() {
                    let projected = {
                        let head = row.slice(ndarray::s![..k]).to_owned();
                        let mut head =
                            head.insert_axis(ndarray::Axis(0));
                        inner.h_k_in_place(&mut head);
                        head
                    };
                    for j in 0..row.len() {
                        row[j] = if j < k { projected[(0, j)] } else { 0.0 };
                    }
                }
            }
        }
    }

    /// δ_K(v) on the tape, one value per batch row.
    ///
    /// Precondition: `v` already lies in K̃ (it comes out of
    /// [`ConstraintSet::dual_transform`]), so the infinite branch cannot
    /// occur and δ reduces to a linear functional of the governed coordinates.
    pub fn support_delta_on_tape(&self, t: &mut Tape, v: ValueRef) -> ValueRef {
        assert_eq!(v.shape.cols, self.dim(), "support_delta_on_tape: dimension mismatch");
        match self {
            ConstraintSet::FullSpace { .. } | ConstraintSet::NonNegOrthant { .. } => {
                t.constant(Mat::zeros((v.shape.rows, 1)))
            }
            ConstraintSet::FloorBox { kappa, .. } => {
                let total = t.sum_cols(v);
                t.scale(total, *kappa)
            }
            ConstraintSet::ZeroPadded { inner, .. } => match &**inner {
                ConstraintSet::FloorBox { kappa, .. } => {
                    // Only the governed coordinates enter the sum.
                    let k = inner.dim();
                    let mut mask = Mat::zeros((1, self.dim()));
                    for j in 0..k {
                        mask[(0, j)] = 1.0;
                    }
                    let mask = t.constant(mask);
                    let masked = t.mul(v, mask);
                    let total = t.sum_cols(masked);
                    t.scale(total, *kappa)
                }
                _ => t.constant(Mat::zeros((v.shape.rows, 1))),
            },
        }
    }
}
