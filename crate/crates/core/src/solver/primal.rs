//! Deep primal SMP solver.
//!
//! The solver learns the initial adjoint value p₀, per-time-step portfolio
//! heads π_i (hard-constrained into K), and adjoint-integrand heads q_i, by
//! alternating two substeps per training step on a shared noise batch:
//!
//! 1. simulate the full (X, p) system in training mode and take one Adam
//!    step on the terminal-condition loss `E|p_N + U'(X_N)|²` over the group
//!    {p₀, all q-heads};
//! 2. sweep i = 0..N−1, re-simulating one Euler step at a time so that each
//!    step already uses the parameters updated in substep 1 and the π-heads
//!    updated earlier in the sweep, taking one Adam step on the Hamiltonian
//!    stationarity loss `E[π_iᵀσ(p_iθ + q_i)]` over π-head i alone.
//!
//! Lower/upper bounds on the optimal value come from inference-mode
//! Monte-Carlo: `V_l = E[U(X_N)]` and `V_u = E[Ũ(−p_N)] − x₀p₀`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintSet, HeadPosition};
use crate::diffcore::{Mat, ParamId, ParamStore, Tape, ValueRef};
use crate::market::{self, AuxState, Coefficients, MarketModel, NoiseBatch};
use crate::nn::{ConstantHead, FeedForwardHead, Mode, OutputTransform, DEFAULT_HIDDEN};
use crate::optim::{AdamConfig, AdamGroup, PiecewiseSchedule};
use crate::solver::{
    eval_stream, shard_sizes, training_stream, BoundsEstimate, BoundsRecord, RunningStat,
    StepDiagnostics, StepRecord, TrainError, TrainingHistory, MAX_CONSECUTIVE_NON_FINITE,
};
use crate::utility::Utility;

/// Uniform initialization intervals for the t = 0 trainables.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrimalInitRanges {
    pub p0: (f64, f64),
    pub pi0: (f64, f64),
    pub q0: (f64, f64),
}

impl Default for PrimalInitRanges {
    fn default() -> Self {
        PrimalInitRanges { p0: (-0.4, -0.2), pi0: (0.0, 0.2), q0: (-0.1, 0.1) }
    }
}

/// Architecture switches for the per-time-step heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrimalArchitecture {
    /// π_i = head_i(X_i, π_{i−1}) instead of head_i(X_i), for i ≥ 1.
    pub semi_recurrent_pi: bool,
    /// q_i = head_i(X_i, q_{i−1}) instead of head_i(X_i), for i ≥ 1.
    pub semi_recurrent_q: bool,
    /// Feed the market's extra per-path observable (√ν on the Heston
    /// market) into the q-heads alongside X_i.
    pub extra_q_input: bool,
}

/// Full configuration of a primal training run.
#[derive(Clone, Debug)]
pub struct PrimalConfig {
    pub x0: f64,
    pub horizon: f64,
    pub n_time_steps: usize,
    pub batch_size: usize,
    /// Monte-Carlo paths per bound evaluation.
    pub n_mc: usize,
    /// Evaluate bounds every this many training steps.
    pub eval_every: usize,
    pub total_steps: usize,
    /// When set, the run revisits a fixed dataset of `total_steps / epochs`
    /// noise batches once per epoch instead of drawing fresh noise.
    pub epochs: Option<usize>,
    pub bn_epsilon: f64,
    pub lr_bsde: PiecewiseSchedule,
    pub lr_control: PiecewiseSchedule,
    pub seed: u64,
    pub architecture: PrimalArchitecture,
    pub init: PrimalInitRanges,
}

impl PrimalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.x0 <= 0.0 {
            return Err(format!("x0 must be positive, got {}", self.x0));
        }
        if self.horizon <= 0.0 {
            return Err(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.n_time_steps == 0 {
            return Err("n_time_steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if self.n_mc < 2 {
            return Err("n_mc must be at least 2 (standard errors need it)".into());
        }
        if self.eval_every == 0 {
            return Err("eval_every must be at least 1".into());
        }
        if self.bn_epsilon <= 0.0 {
            return Err(format!("bn_epsilon must be positive, got {}", self.bn_epsilon));
        }
        if let Some(e) = self.epochs {
            if e == 0 {
                return Err("epochs must be at least 1 when set".into());
            }
            if self.total_steps % e != 0 {
                return Err(format!(
                    "total_steps ({}) must be divisible by epochs ({e})",
                    self.total_steps
                ));
            }
        }
        let (lo, hi) = self.init.p0;
        if lo >= hi || self.init.pi0.0 >= self.init.pi0.1 || self.init.q0.0 >= self.init.q0.1 {
            return Err("init ranges must be non-empty intervals".into());
        }
        Ok(())
    }

    fn dt(&self) -> f64 {
        self.horizon / self.n_time_steps as f64
    }

    fn per_epoch(&self) -> usize {
        match self.epochs {
            Some(e) => self.total_steps / e,
            None => self.total_steps,
        }
    }
}

/// On-tape references to one simulated batch: states, adjoints, and the head
/// outputs that produced them.
pub struct SimulatedPaths {
    /// X_0..X_N (length N+1).
    pub x: Vec<ValueRef>,
    /// p_0..p_N (length N+1).
    pub p: Vec<ValueRef>,
    /// π_0..π_{N−1}.
    pub pi: Vec<ValueRef>,
    /// q_0..q_{N−1}.
    pub q: Vec<ValueRef>,
}

pub struct PrimalSolver {
    cfg: PrimalConfig,
    market: MarketModel,
    utility: Utility,
    constraint: ConstraintSet,
    store: ParamStore,
    p0: ParamId,
    pi0: ConstantHead,
    q0: ConstantHead,
    pi_heads: Vec<FeedForwardHead>,
    q_heads: Vec<FeedForwardHead>,
    adam_bsde: AdamGroup,
    /// One group per time point; index 0 is the π₀ constant head.
    adam_pi: Vec<AdamGroup>,
    /// Per-time-index coefficients, precomputed when the market is
    /// deterministic (index 0..N).
    det_coeffs: Option<Vec<Coefficients>>,
}

impl PrimalSolver {
    pub fn new(
        cfg: PrimalConfig,
        market: MarketModel,
        utility: Utility,
        constraint: ConstraintSet,
    ) -> Result<Self, String> {
        cfg.validate()?;
        market.validate(cfg.horizon)?;
        utility.validate()?;
        constraint.validate()?;
        let m = market.total_dim();
        if constraint.dim() != m {
            return Err(format!(
                "constraint dimension {} does not match the market's {m} coordinates",
                constraint.dim()
            ));
        }
        if cfg.architecture.extra_q_input && market.extra_head_input(&market.init_aux(1)).is_none()
        {
            return Err("extra_q_input set, but this market provides no extra observable".into());
        }

        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let p0v = rng.gen_range(cfg.init.p0.0..cfg.init.p0.1);
        let p0 = store.register("p0", Mat::from_elem((1, 1), p0v));
        let pi0 = ConstantHead::init(
            &mut store,
            "pi.0",
            m,
            constraint.primal_transform(HeadPosition::Initial),
            cfg.init.pi0,
            &mut rng,
        );
        let q0 = ConstantHead::init(
            &mut store,
            "q.0",
            m,
            OutputTransform::Identity,
            cfg.init.q0,
            &mut rng,
        );

        let extra_cols = usize::from(cfg.architecture.extra_q_input);
        let pi_in = 1 + if cfg.architecture.semi_recurrent_pi { m } else { 0 };
        let q_in = 1 + extra_cols + if cfg.architecture.semi_recurrent_q { m } else { 0 };
        let later_transform = constraint.primal_transform(HeadPosition::Later);
        let mut pi_heads = Vec::new();
        let mut q_heads = Vec::new();
        for i in 1..cfg.n_time_steps {
            pi_heads.push(FeedForwardHead::init(
                &mut store,
                &format!("pi.{i}"),
                pi_in,
                m,
                DEFAULT_HIDDEN,
                later_transform.clone(),
                cfg.bn_epsilon,
                &mut rng,
            ));
            q_heads.push(FeedForwardHead::init(
                &mut store,
                &format!("q.{i}"),
                q_in,
                m,
                DEFAULT_HIDDEN,
                OutputTransform::Identity,
                cfg.bn_epsilon,
                &mut rng,
            ));
        }

        let mut bsde_params = vec![p0];
        bsde_params.extend(q0.trainable_params());
        for h in &q_heads {
            bsde_params.extend(h.trainable_params());
        }
        let adam_bsde = AdamGroup::new(AdamConfig::default(), cfg.lr_bsde.clone(), bsde_params);
        let mut adam_pi = Vec::with_capacity(cfg.n_time_steps);
        adam_pi.push(AdamGroup::new(
            AdamConfig::default(),
            cfg.lr_control.clone(),
            pi0.trainable_params(),
        ));
        for h in &pi_heads {
            adam_pi.push(AdamGroup::new(
                AdamConfig::default(),
                cfg.lr_control.clone(),
                h.trainable_params(),
            ));
        }

        let det_coeffs = market.has_deterministic_coefficients().then(|| {
            let aux = market.init_aux(1);
            let dt = cfg.dt();
            (0..=cfg.n_time_steps)
                .map(|i| market.coefficients(&aux, i as f64 * dt))
                .collect()
        });

        Ok(PrimalSolver {
            cfg,
            market,
            utility,
            constraint,
            store,
            p0,
            pi0,
            q0,
            pi_heads,
            q_heads,
            adam_bsde,
            adam_pi,
            det_coeffs,
        })
    }

    pub fn config(&self) -> &PrimalConfig {
        &self.cfg
    }

    pub fn constraint(&self) -> &ConstraintSet {
        &self.constraint
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Current value of the trainable initial adjoint.
    pub fn p0_value(&self) -> f64 {
        self.store.value(self.p0)[(0, 0)]
    }

    fn coeffs_at(&self, aux: &AuxState, i: usize) -> Coefficients {
        match &self.det_coeffs {
            Some(cache) => cache[i].clone(),
            None => self.market.coefficients(aux, i as f64 * self.cfg.dt()),
        }
    }

    fn eval_pi_head(
        &mut self,
        t: &mut Tape,
        i: usize,
        x: ValueRef,
        prev_pi: ValueRef,
        mode: Mode,
    ) -> ValueRef {
        debug_assert!(i >= 1);
        if self.cfg.architecture.semi_recurrent_pi {
            self.pi_heads[i - 1].forward_semi_recurrent(t, &mut self.store, x, prev_pi, mode)
        } else {
            self.pi_heads[i - 1].forward(t, &mut self.store, x, mode)
        }
    }

    fn eval_q_head(
        &mut self,
        t: &mut Tape,
        i: usize,
        x: ValueRef,
        prev_q: ValueRef,
        extra: Option<&Mat>,
        mode: Mode,
    ) -> ValueRef {
        debug_assert!(i >= 1);
        let input = match extra {
            Some(e) => {
                let e_c = t.constant(e.clone());
                crate::nn::concat_cols(t, x, e_c)
            }
            None => x,
        };
        if self.cfg.architecture.semi_recurrent_q {
            self.q_heads[i - 1].forward_semi_recurrent(t, &mut self.store, input, prev_q, mode)
        } else {
            self.q_heads[i - 1].forward(t, &mut self.store, input, mode)
        }
    }

    fn step_extra(&self, aux: &AuxState) -> Option<Mat> {
        if self.cfg.architecture.extra_q_input {
            self.market.extra_head_input(aux)
        } else {
            None
        }
    }

    /// Simulates the coupled (X, p) system on one tape.
    pub fn forward_simulate(
        &mut self,
        t: &mut Tape,
        noise: &NoiseBatch,
        mode: Mode,
    ) -> SimulatedPaths {
        let n = self.cfg.n_time_steps;
        let b = noise.batch();
        assert_eq!(noise.n_steps(), n, "noise has {} steps, solver needs {n}", noise.n_steps());
        let dt = self.cfg.dt();
        let mut aux = self.market.init_aux(b);

        let mut xs = Vec::with_capacity(n + 1);
        let mut ps = Vec::with_capacity(n + 1);
        let mut pis = Vec::with_capacity(n);
        let mut qs = Vec::with_capacity(n);

        xs.push(t.constant(Mat::from_elem((b, 1), self.cfg.x0)));
        let p0_row = t.param(&self.store, self.p0);
        ps.push(t.broadcast_row(p0_row, b));

        for i in 0..n {
            let coeffs = self.coeffs_at(&aux, i);
            let (pi_i, q_i) = if i == 0 {
                (self.pi0.forward(t, &self.store, b), self.q0.forward(t, &self.store, b))
            } else {
                let extra = self.step_extra(&aux);
                let pi_i = self.eval_pi_head(t, i, xs[i], pis[i - 1], mode);
                let q_i = self.eval_q_head(t, i, xs[i], qs[i - 1], extra.as_ref(), mode);
                (pi_i, q_i)
            };
            pis.push(pi_i);
            qs.push(q_i);
            let db = t.constant(noise.steps[i].clone());
            xs.push(market::step_wealth(t, &coeffs, xs[i], pi_i, db, dt));
            ps.push(market::step_adjoint(t, &coeffs, ps[i], pi_i, q_i, db, dt));
            aux = self.market.step_aux(&aux, i as f64 * dt, dt, &noise.steps[i]);
        }
        SimulatedPaths { x: xs, p: ps, pi: pis, q: qs }
    }

    /// Terminal-condition loss `E|p_N + U'(X_N)|²`.
    pub fn loss_bsde(&self, t: &mut Tape, x_n: ValueRef, p_n: ValueRef) -> ValueRef {
        let target = self.utility.u_prime_on_tape(t, x_n);
        let resid = t.add(p_n, target);
        let sq = t.square(resid);
        t.mean_all(sq)
    }

    /// Hamiltonian stationarity loss at one time point:
    /// `E[π_iᵀ σ (p_i θ + q_i)]`.
    pub fn loss_control(
        &self,
        t: &mut Tape,
        coeffs: &Coefficients,
        pi_i: ValueRef,
        p_i: ValueRef,
        q_i: ValueRef,
    ) -> ValueRef {
        let ps = coeffs.pi_sigma(t, pi_i);
        let theta = coeffs.theta_on_tape(t);
        let ptheta = t.mul(p_i, theta);
        let target = t.add(ptheta, q_i);
        let prod = t.dot_rows(ps, target);
        t.mean_all(prod)
    }

    /// One two-substep training step on the given noise batch.
    pub fn training_step(&mut self, noise: &NoiseBatch) -> StepDiagnostics {
        let n = self.cfg.n_time_steps;
        let b = noise.batch();
        let dt = self.cfg.dt();

        // Substep 1: full simulation, Adam on the BSDE group {p₀, q-heads}.
        let (loss_bsde, bsde_outcome) = {
            let mut t = Tape::new();
            let sim = self.forward_simulate(&mut t, noise, Mode::Training);
            let loss = self.loss_bsde(&mut t, sim.x[n], sim.p[n]);
            let loss_v = t.value(loss)[(0, 0)];
            let grads = t.backward(loss);
            let outcome = self.adam_bsde.step(&mut self.store, &grads);
            (loss_v, outcome)
        };

        let mut control_losses = Vec::with_capacity(n);

        // Substep 2, i = 0: at t = 0 the state is deterministic, so a single
        // row carries the whole batch's information.
        {
            let aux0 = self.market.init_aux(1);
            let coeffs0 = self.coeffs_at(&aux0, 0);
            let mut t = Tape::new();
            let pi0 = self.pi0.forward(&mut t, &self.store, 1);
            let q0 = self.q0.forward(&mut t, &self.store, 1);
            let p0c = t.constant(self.store.value(self.p0).clone());
            let loss0 = self.loss_control(&mut t, &coeffs0, pi0, p0c, q0);
            control_losses.push(t.value(loss0)[(0, 0)]);
            let grads = t.backward(loss0);
            self.adam_pi[0].step(&mut self.store, &grads);
            self.pi0.apply_post_update_projection(&mut self.store);
        }

        // Substep 2, i ≥ 1: carry (X, p) forward one Euler step at a time,
        // always with the freshest parameter values — the BSDE group from
        // substep 1 and every π-head updated earlier in this sweep.
        let mut aux = self.market.init_aux(b);
        let (mut pi_prev, mut q_prev) = {
            let mut t = Tape::new();
            let pi0 = self.pi0.forward(&mut t, &self.store, b);
            let q0 = self.q0.forward(&mut t, &self.store, b);
            (t.value(pi0).clone(), t.value(q0).clone())
        };
        let mut x_val = Mat::from_elem((b, 1), self.cfg.x0);
        let mut p_val = Mat::from_elem((b, 1), self.p0_value());

        for i in 0..n.saturating_sub(1) {
            // Euler step i -> i+1 with the carried values (constants only).
            let coeffs = self.coeffs_at(&aux, i);
            {
                let mut t = Tape::new();
                let x = t.constant(x_val);
                let p = t.constant(p_val);
                let pi = t.constant(pi_prev.clone());
                let q = t.constant(q_prev.clone());
                let db = t.constant(noise.steps[i].clone());
                let xn = market::step_wealth(&mut t, &coeffs, x, pi, db, dt);
                let pn = market::step_adjoint(&mut t, &coeffs, p, pi, q, db, dt);
                x_val = t.value(xn).clone();
                p_val = t.value(pn).clone();
            }
            aux = self.market.step_aux(&aux, i as f64 * dt, dt, &noise.steps[i]);

            // Update π-head i+1 against the Hamiltonian loss at t_{i+1}.
            let coeffs_next = self.coeffs_at(&aux, i + 1);
            let extra = self.step_extra(&aux);
            let mut t = Tape::new();
            let x_c = t.constant(x_val.clone());
            let p_c = t.constant(p_val.clone());
            let pi_prev_c = t.constant(pi_prev.clone());
            let q_prev_c = t.constant(q_prev.clone());
            let pi_ref = self.eval_pi_head(&mut t, i + 1, x_c, pi_prev_c, Mode::Training);
            let q_ref = self.eval_q_head(&mut t, i + 1, x_c, q_prev_c, extra.as_ref(), Mode::Training);
            let loss_i = self.loss_control(&mut t, &coeffs_next, pi_ref, p_c, q_ref);
            control_losses.push(t.value(loss_i)[(0, 0)]);
            let grads = t.backward(loss_i);
            self.adam_pi[i + 1].step(&mut self.store, &grads);

            // Re-evaluate π_{i+1} so the ongoing chain uses the updated head.
            let pi_updated = self.eval_pi_head(&mut t, i + 1, x_c, pi_prev_c, Mode::Training);
            pi_prev = t.value(pi_updated).clone();
            q_prev = t.value(q_ref).clone();
        }

        StepDiagnostics { loss_bsde, control_losses, bsde_outcome }
    }

    /// Simulates one inference-mode shard to the terminal time, returning
    /// (X_N, p_N). The tape is rebuilt per time step, so memory stays flat
    /// in N; batch norm reads running statistics and never writes.
    fn simulate_terminal_inference(
        &self,
        store: &mut ParamStore,
        noise: &NoiseBatch,
    ) -> (Mat, Mat) {
        let n = self.cfg.n_time_steps;
        let b = noise.batch();
        let dt = self.cfg.dt();
        let mut aux = self.market.init_aux(b);
        let mut x_val = Mat::from_elem((b, 1), self.cfg.x0);
        let mut p_val = Mat::from_elem((b, 1), self.p0_value());
        let mut pi_prev = Mat::zeros((0, 0));
        let mut q_prev = Mat::zeros((0, 0));

        for i in 0..n {
            let coeffs = self.coeffs_at(&aux, i);
            let mut t = Tape::new();
            let x_c = t.constant(x_val);
            let p_c = t.constant(p_val);
            let (pi_ref, q_ref) = if i == 0 {
                (self.pi0.forward(&mut t, store, b), self.q0.forward(&mut t, store, b))
            } else {
                let extra = if self.cfg.architecture.extra_q_input {
                    self.market.extra_head_input(&aux)
                } else {
                    None
                };
                let pi_prev_c = t.constant(pi_prev);
                let q_prev_c = t.constant(q_prev);
                let pi = if self.cfg.architecture.semi_recurrent_pi {
                    self.pi_heads[i - 1].forward_semi_recurrent(
                        &mut t,
                        store,
                        x_c,
                        pi_prev_c,
                        Mode::Inference,
                    )
                } else {
                    self.pi_heads[i - 1].forward(&mut t, store, x_c, Mode::Inference)
                };
                let q_in = match extra {
                    Some(e) => {
                        let e_c = t.constant(e);
                        crate::nn::concat_cols(&mut t, x_c, e_c)
                    }
                    None => x_c,
                };
                let q = if self.cfg.architecture.semi_recurrent_q {
                    self.q_heads[i - 1].forward_semi_recurrent(
                        &mut t,
                        store,
                        q_in,
                        q_prev_c,
                        Mode::Inference,
                    )
                } else {
                    self.q_heads[i - 1].forward(&mut t, store, q_in, Mode::Inference)
                };
                (pi, q)
            };
            let db = t.constant(noise.steps[i].clone());
            let xn = market::step_wealth(&mut t, &coeffs, x_c, pi_ref, db, dt);
            let pn = market::step_adjoint(&mut t, &coeffs, p_c, pi_ref, q_ref, db, dt);
            x_val = t.value(xn).clone();
            p_val = t.value(pn).clone();
            pi_prev = t.value(pi_ref).clone();
            q_prev = t.value(q_ref).clone();
            aux = self.market.step_aux(&aux, i as f64 * dt, dt, &noise.steps[i]);
        }
        (x_val, p_val)
    }

    /// Monte-Carlo bound estimate over `n_mc` fresh inference-mode paths.
    /// `eval_ordinal` selects the noise substream block, so separate
    /// evaluations are independent while the whole run stays deterministic.
    pub fn estimate_bounds(&self, n_mc: usize, eval_ordinal: u64) -> BoundsEstimate {
        let n = self.cfg.n_time_steps;
        let m = self.market.total_dim();
        let dt = self.cfg.dt();
        let sizes = shard_sizes(n_mc);
        let shard_stats: Vec<(RunningStat, RunningStat, usize)> = sizes
            .par_iter()
            .enumerate()
            .map(|(s, &rows)| {
                let mut store = self.store.clone();
                let noise = sample_noise_for(
                    self.cfg.seed,
                    eval_stream(eval_ordinal, s as u64),
                    rows,
                    m,
                    n,
                    dt,
                );
                let (x_n, p_n) = self.simulate_terminal_inference(&mut store, &noise);
                let mut lower = RunningStat::default();
                let mut upper = RunningStat::default();
                let mut guarded = 0usize;
                for r in 0..rows {
                    lower.add(self.utility.u(x_n[(r, 0)]));
                    let y = -p_n[(r, 0)];
                    if y > 0.0 {
                        upper.add(self.utility.fenchel(y));
                    } else {
                        upper.add(0.0);
                        guarded += 1;
                    }
                }
                (lower, upper, guarded)
            })
            .collect();

        let mut lower = RunningStat::default();
        let mut upper = RunningStat::default();
        let mut guarded_rows = 0usize;
        for (l, u, g) in &shard_stats {
            lower.merge(l);
            upper.merge(u);
            guarded_rows += g;
        }
        BoundsEstimate {
            lower: lower.mean(),
            lower_stderr: lower.stderr(),
            upper: upper.mean() - self.cfg.x0 * self.p0_value(),
            upper_stderr: upper.stderr(),
            guarded_rows,
            dropped_rows: 0,
        }
    }

    /// Runs the full training loop. `observer` fires after every bound
    /// evaluation (for progress reporting); the returned history carries one
    /// row per step plus all bound evaluations.
    pub fn train(
        &mut self,
        mut observer: impl FnMut(&BoundsRecord),
    ) -> Result<TrainingHistory, TrainError> {
        let started = Instant::now();
        let mut history = TrainingHistory::default();
        let per_epoch = self.cfg.per_epoch();
        let n = self.cfg.n_time_steps;
        let m = self.market.total_dim();
        let (b, dt) = (self.cfg.batch_size, self.cfg.dt());
        let mut consecutive_bad = 0usize;
        let mut eval_ordinal = 0u64;

        for k in 0..self.cfg.total_steps {
            let stream = training_stream(k, per_epoch);
            let noise = sample_noise_for(self.cfg.seed, stream, b, m, n, dt);
            let diag = self.training_step(&noise);
            if diag.loss_bsde.is_finite() {
                consecutive_bad = 0;
            } else {
                consecutive_bad += 1;
                if consecutive_bad >= MAX_CONSECUTIVE_NON_FINITE {
                    return Err(TrainError::NonFinite { step: k + 1, consecutive: consecutive_bad });
                }
            }
            let step = k + 1;
            history.steps.push(StepRecord {
                step,
                seconds: started.elapsed().as_secs_f64(),
                value: self.p0_value(),
            });
            if step % self.cfg.eval_every == 0 || step == self.cfg.total_steps {
                let bounds = self.estimate_bounds(self.cfg.n_mc, eval_ordinal);
                eval_ordinal += 1;
                let record = BoundsRecord { step, bounds };
                observer(&record);
                history.bounds.push(record);
            }
        }
        Ok(history)
    }
}

/// Training/evaluation noise draw, centralizing the stream discipline.
fn sample_noise_for(seed: u64, stream: u64, b: usize, m: usize, n: usize, dt: f64) -> NoiseBatch {
    market::sample_noise(seed, stream, b, m, n, dt)
}
