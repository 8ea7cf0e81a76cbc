//! First-order optimization: classical Adam with bias correction and
//! piecewise-constant learning-rate schedules.
//!
//! Parameters are partitioned into named groups (e.g. the BSDE integrand
//! heads versus the control heads), each group carrying its own schedule and
//! its own Adam step counter. A group whose gradient batch contains any
//! non-finite entry skips that step entirely — moments and step count stay
//! untouched — so one exploding batch cannot corrupt the moment estimates.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Gradients, Mat, ParamId, ParamStore};

/// Piecewise-constant schedule: `values[k]` applies once `step` has passed
/// `k` boundaries. A boundary step itself still belongs to the left segment,
/// so with boundaries `[1000]` and values `[1e-2, 1e-3]`, step 1000 reads
/// `1e-2` and step 1001 reads `1e-3`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PiecewiseSchedule {
    pub boundaries: Vec<usize>,
    pub values: Vec<f64>,
}

impl PiecewiseSchedule {
    pub fn new(boundaries: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(
            values.len(),
            boundaries.len() + 1,
            "schedule needs exactly one more value than boundaries"
        );
        assert!(
            boundaries.windows(2).all(|w| w[0] < w[1]),
            "schedule boundaries must be strictly increasing"
        );
        Self { boundaries, values }
    }

    /// A schedule that always returns `v`.
    pub fn constant(v: f64) -> Self {
        Self { boundaries: vec![], values: vec![v] }
    }

    /// Learning rate in effect at 1-based step `step`.
    pub fn at(&self, step: usize) -> f64 {
        let k = self.boundaries.iter().filter(|&&b| b < step).count();
        self.values[k]
    }
}

/// Adam configuration. Defaults follow the common deep-learning settings
/// except for the larger `epsilon`, which matches the numerics these solvers
/// were tuned with.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-7 }
    }
}

struct Slot {
    m: Mat,
    v: Mat,
}

/// What happened when a group was asked to step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    /// Parameters were updated.
    Applied,
    /// At least one gradient entry was non-finite; nothing changed.
    SkippedNonFinite,
}

/// Adam state for one parameter group sharing a single learning-rate
/// schedule and a single bias-correction clock.
pub struct AdamGroup {
    config: AdamConfig,
    schedule: PiecewiseSchedule,
    params: Vec<ParamId>,
    slots: HashMap<ParamId, Slot>,
    steps_taken: usize,
    skipped_steps: usize,
}

impl AdamGroup {
    pub fn new(config: AdamConfig, schedule: PiecewiseSchedule, params: Vec<ParamId>) -> Self {
        Self {
            config,
            schedule,
            params,
            slots: HashMap::new(),
            steps_taken: 0,
            skipped_steps: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Number of applied (not skipped) steps so far.
    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    /// Number of steps rejected because the gradient was non-finite.
    pub fn skipped_steps(&self) -> usize {
        self.skipped_steps
    }

    /// Learning rate the next applied step would use.
    pub fn next_learning_rate(&self) -> f64 {
        self.schedule.at(self.steps_taken + 1)
    }

    /// One Adam update over every parameter in the group.
    ///
    /// Parameters absent from `grads` receive a zero gradient (their moments
    /// still decay). If any present gradient has a non-finite entry the whole
    /// group step is skipped and the bias-correction clock does not advance.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> StepOutcome {
        let mut gathered: Vec<(ParamId, Mat)> = Vec::with_capacity(self.params.len());
        for &pid in &self.params {
            let g = grads.get_or_zeros(store, pid);
            if g.iter().any(|v| !v.is_finite()) {
                self.skipped_steps += 1;
                return StepOutcome::SkippedNonFinite;
            }
            gathered.push((pid, g));
        }

        self.steps_taken += 1;
        let t = self.steps_taken as i32;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let lr = self.schedule.at(self.steps_taken);
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (pid, g) in gathered {
            let slot = self.slots.entry(pid).or_insert_with(|| Slot {
                m: Mat::zeros(g.dim()),
                v: Mat::zeros(g.dim()),
            });
            slot.m.zip_mut_with(&g, |m, &gi| *m = beta1 * *m + (1.0 - beta1) * gi);
            slot.v.zip_mut_with(&g, |v, &gi| *v = beta2 * *v + (1.0 - beta2) * gi * gi);
            let value = store.value_mut(pid);
            for ((x, m), v) in value.iter_mut().zip(slot.m.iter()).zip(slot.v.iter()) {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        StepOutcome::Applied
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tape;
    use ndarray::arr2;

    fn grads_for(store: &ParamStore, id: ParamId, g: Mat) -> Gradients {
        // Builds a Gradients holding exactly `g` for `id` by differentiating
        // mean(param * g_const) * n, whose gradient is g_const.
        let mut t = Tape::new();
        let p = t.param(store, id);
        let (rows, cols) = g.dim();
        let c = t.constant(g);
        let prod = t.mul(p, c);
        let m = t.mean_all(prod);
        let scaled = t.scale(m, (rows * cols) as f64);
        t.backward(scaled)
    }

    #[test]
    fn schedule_boundary_step_stays_on_left_segment() {
        let s = PiecewiseSchedule::new(vec![1000, 3000], vec![1e-2, 1e-3, 1e-4]);
        assert_eq!(s.at(1), 1e-2);
        assert_eq!(s.at(1000), 1e-2);
        assert_eq!(s.at(1001), 1e-3);
        assert_eq!(s.at(3000), 1e-3);
        assert_eq!(s.at(3001), 1e-4);
        assert_eq!(s.at(1_000_000), 1e-4);
    }

    #[test]
    #[should_panic(expected = "one more value")]
    fn schedule_rejects_mismatched_lengths() {
        PiecewiseSchedule::new(vec![10], vec![1e-2]);
    }

    #[test]
    fn first_adam_step_moves_by_signed_learning_rate() {
        // After bias correction the first update is lr * g / (|g| + eps),
        // i.e. almost exactly lr in the direction opposing the gradient.
        let mut store = ParamStore::new();
        let id = store.register("w", arr2(&[[1.0]]));
        let grads = grads_for(&store, id, arr2(&[[0.5]]));
        let mut group = AdamGroup::new(
            AdamConfig::default(),
            PiecewiseSchedule::constant(1e-2),
            vec![id],
        );
        assert_eq!(group.step(&mut store, &grads), StepOutcome::Applied);
        let expected_delta = -1e-2 * 0.5 / (0.5 + 1e-7);
        let got = store.value(id)[(0, 0)] - 1.0;
        assert!(
            (got - expected_delta).abs() < 1e-15,
            "delta {got:.12e} vs expected {expected_delta:.12e}"
        );
        // Frozen value of that expression, as an independent regression pin.
        assert!((got + 9.999998000000401e-3).abs() < 1e-12);
    }

    #[test]
    fn adam_converges_on_a_convex_quadratic() {
        // Minimize mean((w - 3)^2); the unique minimum is w = 3.
        let mut store = ParamStore::new();
        let id = store.register("w", arr2(&[[0.0, 10.0]]));
        let mut group = AdamGroup::new(
            AdamConfig::default(),
            PiecewiseSchedule::constant(0.05),
            vec![id],
        );
        for _ in 0..4000 {
            let mut t = Tape::new();
            let w = t.param(&store, id);
            let target = t.constant(arr2(&[[3.0, 3.0]]));
            let diff = t.sub(w, target);
            let sq = t.square(diff);
            let loss = t.mean_all(sq);
            let grads = t.backward(loss);
            group.step(&mut store, &grads);
        }
        for &w in store.value(id).iter() {
            assert!((w - 3.0).abs() < 1e-3, "w = {w}");
        }
    }

    #[test]
    fn non_finite_gradient_skips_group_without_advancing_clock() {
        let mut store = ParamStore::new();
        let id = store.register("w", arr2(&[[2.0]]));
        let mut group = AdamGroup::new(
            AdamConfig::default(),
            PiecewiseSchedule::constant(1e-2),
            vec![id],
        );

        // A NaN gradient arises from sqrt of a negative value.
        let mut t = Tape::new();
        let w = t.param(&store, id);
        let neg = t.scale(w, -1.0);
        let s = t.sqrt(neg);
        let loss = t.mean_all(s);
        let grads = t.backward(loss);
        assert!(!grads.all_finite());

        assert_eq!(group.step(&mut store, &grads), StepOutcome::SkippedNonFinite);
        assert_eq!(store.value(id)[(0, 0)], 2.0, "parameter must not move");
        assert_eq!(group.steps_taken(), 0);
        assert_eq!(group.skipped_steps(), 1);

        // A clean gradient afterwards is treated as the true first step.
        let grads = grads_for(&store, id, arr2(&[[1.0]]));
        assert_eq!(group.step(&mut store, &grads), StepOutcome::Applied);
        assert_eq!(group.steps_taken(), 1);
        let delta = store.value(id)[(0, 0)] - 2.0;
        assert!((delta + 1e-2 * 1.0 / (1.0 + 1e-7)).abs() < 1e-15);
    }

    #[test]
    fn group_step_uses_schedule_of_applied_steps_only() {
        let mut store = ParamStore::new();
        let id = store.register("w", arr2(&[[0.0]]));
        let mut group = AdamGroup::new(
            AdamConfig::default(),
            PiecewiseSchedule::new(vec![2], vec![1.0, 100.0]),
            vec![id],
        );
        assert_eq!(group.next_learning_rate(), 1.0);
        let g = grads_for(&store, id, arr2(&[[1.0]]));
        group.step(&mut store, &g);
        assert_eq!(group.next_learning_rate(), 1.0);
        let g = grads_for(&store, id, arr2(&[[1.0]]));
        group.step(&mut store, &g);
        assert_eq!(group.next_learning_rate(), 100.0);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn schedule_is_monotone_in_segment_index(
                step in 1usize..100_000,
                b1 in 1usize..1000,
                gap in 1usize..1000,
            ) {
                let s = PiecewiseSchedule::new(vec![b1, b1 + gap], vec![1e-2, 1e-3, 1e-4]);
                let expected = if step <= b1 {
                    1e-2
                } else if step <= b1 + gap {
                    1e-3
                } else {
                    1e-4
                };
                prop_assert_eq!(s.at(step), expected);
            }

            #[test]
            fn adam_update_is_bounded_by_learning_rate_scale(
                g in -1e3f64..1e3,
                w0 in -10.0f64..10.0,
            ) {
                prop_assume!(g.abs() > 1e-9);
                let mut store = ParamStore::new();
                let id = store.register("w", arr2(&[[w0]]));
                let mut group = AdamGroup::new(
                    AdamConfig::default(),
                    PiecewiseSchedule::constant(1e-3),
                    vec![id],
                );
                let grads = grads_for(&store, id, arr2(&[[g]]));
                group.step(&mut store, &grads);
                let delta = (store.value(id)[(0, 0)] - w0).abs();
                // |update| = lr * |g| / (|g| + eps) < lr, regardless of g's scale.
                prop_assert!(delta < 1e-3 + 1e-12);
                prop_assert!(delta > 0.0);
            }
        }
    }
}
