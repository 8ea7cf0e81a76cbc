//! Deep dual SMP solver.
//!
//! The dual problem minimizes `E[Ũ(Y_T)] + x₀y` over initial values y > 0
//! and dual controls v valued in K̃, where Y follows
//! `dY = −Y[(r + δ_K(v))dt + (θ + σ⁻¹v)ᵀdB]`. The solver trains y (through
//! an exponential reparameterization that keeps it positive), per-time-step
//! v-heads (hard-constrained into K̃), and q₂-heads, mirroring the primal
//! solver's two-substep scheme:
//!
//! 1. simulate the (Y, p₂) system in training mode — p₂ runs forward from
//!    p₂(0) = x₀ — and take one Adam step on the q₂-heads against
//!    `E|p₂_N + Ũ'(Y_N)|²`, plus one Adam step on y alone against the dual
//!    objective `E[Ũ(Y_N)] + x₀y` from the same simulation (y gets its own,
//!    faster-decaying learning-rate schedule);
//! 2. sweep i = 0..N−1 re-simulating one Euler step at a time, taking one
//!    Adam step per v-head on the stationarity loss
//!    `E[p₂δ_K(v) + (σ⁻¹v)ᵀq₂]`.
//!
//! Bounds: `Ṽ_u = E[Ũ(Y_N)] + x₀y`, and `Ṽ_l = E[U(X̂_N)]` where X̂ is
//! wealth simulated on the same noise under the candidate portfolio
//! `π̂ = h_K(p₂⁻¹(σ⁻¹)ᵀq₂)` implied by the trained dual system.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::diffcore::{Mat, ParamId, ParamStore, Tape, ValueRef};
use crate::market::{self, AuxState, Coefficients, MarketModel, NoiseBatch};
use crate::nn::{concat_cols, ConstantHead, FeedForwardHead, Mode, OutputTransform, DEFAULT_HIDDEN};
use crate::optim::{AdamConfig, AdamGroup, PiecewiseSchedule};
use crate::solver::{
    eval_stream, shard_sizes, training_stream, BoundsEstimate, BoundsRecord, RunningStat,
    StepDiagnostics, StepRecord, TrainError, TrainingHistory, MAX_CONSECUTIVE_NON_FINITE,
};
use crate::utility::Utility;

/// Rows whose adjoint magnitude falls below this are dropped from the
/// candidate-control lower bound (the division p₂⁻¹ is meaningless there).
pub const ADJOINT_DROP_THRESHOLD: f64 = 1e-12;

/// Uniform initialization intervals for the t = 0 trainables. The `y` range
/// is sampled directly; the stored parameter is ln(y).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualInitRanges {
    pub y: (f64, f64),
    pub v0: (f64, f64),
    pub q20: (f64, f64),
}

impl Default for DualInitRanges {
    fn default() -> Self {
        DualInitRanges { y: (0.1, 0.3), v0: (-0.1, 0.1), q20: (-0.1, 0.1) }
    }
}

/// Architecture switches for the dual per-time-step heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualArchitecture {
    /// Feed the market's extra per-path observable (√ν on the Heston
    /// market) into the q₂-heads alongside Y_i.
    pub extra_q_input: bool,
    /// Feed v_i into the q₂-heads. Off by default: the baseline q₂
    /// architecture deliberately ignores the control, which is what makes
    /// the upper bound drift on constrained problems; this switch exists to
    /// experiment with repairing that.
    pub q2_sees_control: bool,
}

/// Full configuration of a dual training run.
#[derive(Clone, Debug)]
pub struct DualConfig {
    pub x0: f64,
    pub horizon: f64,
    pub n_time_steps: usize,
    pub batch_size: usize,
    pub n_mc: usize,
    pub eval_every: usize,
    pub total_steps: usize,
    pub epochs: Option<usize>,
    pub bn_epsilon: f64,
    /// Learning rate of the q₂ group.
    pub lr_bsde: PiecewiseSchedule,
    /// Learning rate of the per-time-step v-heads.
    pub lr_control: PiecewiseSchedule,
    /// Learning rate of the scalar y (typically decays faster than lr_bsde).
    pub lr_y: PiecewiseSchedule,
    pub seed: u64,
    pub architecture: DualArchitecture,
    pub init: DualInitRanges,
}

impl DualConfig {
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
        if self.init.y.0 <= 0.0 {
            return Err("y must be initialized strictly positive".into());
        }
        if self.init.y.0 >= self.init.y.1
            || self.init.v0.0 >= self.init.v0.1
            || self.init.q20.0 >= self.init.q20.1
        {
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

/// On-tape references to one simulated dual batch.
pub struct DualSimulatedPaths {
    /// Y_0..Y_N (length N+1).
    pub y: Vec<ValueRef>,
    /// p₂_0..p₂_N (length N+1).
    pub p2: Vec<ValueRef>,
    /// v_0..v_{N−1}.
    pub v: Vec<ValueRef>,
    /// q₂_0..q₂_{N−1}.
    pub q2: Vec<ValueRef>,
}

/// Terminal data of one inference-mode shard.
struct DualTerminal {
    y_n: Mat,
    x_hat_n: Mat,
    dropped: Vec<bool>,
}

pub struct DualSolver {
    cfg: DualConfig,
    market: MarketModel,
    utility: Utility,
    constraint: ConstraintSet,
    store: ParamStore,
    /// ln(y): the trainable, unconstrained representation of y.
    eta: ParamId,
    v0: ConstantHead,
    q20: ConstantHead,
    v_heads: Vec<FeedForwardHead>,
    q2_heads: Vec<FeedForwardHead>,
    adam_bsde: AdamGroup,
    adam_y: AdamGroup,
    adam_v: Vec<AdamGroup>,
    det_coeffs: Option<Vec<Coefficients>>,
}

impl DualSolver {
    pub fn new(
        cfg: DualConfig,
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
        let y_init = rng.gen_range(cfg.init.y.0..cfg.init.y.1);
        let eta = store.register("y.log", Mat::from_elem((1, 1), y_init.ln()));
        let v0 = ConstantHead::init(
            &mut store,
            "v.0",
            m,
            constraint.dual_transform(),
            cfg.init.v0,
            &mut rng,
        );
        let q20 = ConstantHead::init(
            &mut store,
            "q2.0",
            m,
            OutputTransform::Identity,
            cfg.init.q20,
            &mut rng,
        );

        let extra_cols = usize::from(cfg.architecture.extra_q_input);
        let v_in = 1;
        let q2_in = 1 + extra_cols + if cfg.architecture.q2_sees_control { m } else { 0 };
        let mut v_heads = Vec::new();
        let mut q2_heads = Vec::new();
        for i in 1..cfg.n_time_steps {
            v_heads.push(FeedForwardHead::init(
                &mut store,
                &format!("v.{i}"),
                v_in,
                m,
                DEFAULT_HIDDEN,
                constraint.dual_transform(),
                cfg.bn_epsilon,
                &mut rng,
            ));
            q2_heads.push(FeedForwardHead::init(
                &mut store,
                &format!("q2.{i}"),
                q2_in,
                m,
                DEFAULT_HIDDEN,
                OutputTransform::Identity,
                cfg.bn_epsilon,
                &mut rng,
            ));
        }

        let mut bsde_params = q20.trainable_params();
        for h in &q2_heads {
            bsde_params.extend(h.trainable_params());
        }
        let adam_bsde = AdamGroup::new(AdamConfig::default(), cfg.lr_bsde.clone(), bsde_params);
        let adam_y = AdamGroup::new(AdamConfig::default(), cfg.lr_y.clone(), vec![eta]);
        let mut adam_v = Vec::with_capacity(cfg.n_time_steps);
        adam_v.push(AdamGroup::new(
            AdamConfig::default(),
            cfg.lr_control.clone(),
            v0.trainable_params(),
        ));
        for h in &v_heads {
            adam_v.push(AdamGroup::new(
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

        Ok(DualSolver {
            cfg,
            market,
            utility,
            constraint,
            store,
            eta,
            v0,
            q20,
            v_heads,
            q2_heads,
            adam_bsde,
            adam_y,
            adam_v,
            det_coeffs,
        })
    }

    pub fn config(&self) -> &DualConfig {
        &self.cfg
    }

    pub fn constraint(&self) -> &ConstraintSet {
        &self.constraint
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Current dual initial value y = exp(η) > 0.
    pub fn y_value(&self) -> f64 {
        self.store.value(self.eta)[(0, 0)].exp()
    }

    fn coeffs_at(&self, aux: &AuxState, i: usize) -> Coefficients {
        match &self.det_coeffs {
            Some(cache) => cache[i].clone(),
            None => self.market.coefficients(aux, i as f64 * self.cfg.dt()),
        }
    }

    fn step_extra(&self, aux: &AuxState) -> Option<Mat> {
        if self.cfg.architecture.extra_q_input {
            self.market.extra_head_input(aux)
        } else {
            None
        }
    }

    fn eval_v_head(&mut self, t: &mut Tape, i: usize, y: ValueRef, mode: Mode) -> ValueRef {
        debug_assert!(i >= 1);
        self.v_heads[i - 1].forward(t, &mut self.store, y, mode)
    }

    fn eval_q2_head(
        &mut self,
        t: &mut Tape,
        i: usize,
        y: ValueRef,
        v: ValueRef,
        extra: Option<&Mat>,
        mode: Mode,
    ) -> ValueRef {
        debug_assert!(i >= 1);
        let mut input = y;
        if let Some(e) = extra {
            let e_c = t.constant(e.clone());
            input = concat_cols(t, input, e_c);
        }
        if self.cfg.architecture.q2_sees_control {
            input = concat_cols(t, input, v);
        }
        self.q2_heads[i - 1].forward(t, &mut self.store, input, mode)
    }

    /// Simulates the coupled (Y, p₂) system on one tape. Y starts at the
    /// trainable y (gradients flow into η through every time step); p₂
    /// starts at the constant x₀.
    pub fn dual_forward(
        &mut self,
        t: &mut Tape,
        noise: &NoiseBatch,
        mode: Mode,
    ) -> DualSimulatedPaths {
        let n = self.cfg.n_time_steps;
        let b = noise.batch();
        assert_eq!(noise.n_steps(), n, "noise has {} steps, solver needs {n}", noise.n_steps());
        let dt = self.cfg.dt();
        let mut aux = self.market.init_aux(b);

        let mut ys = Vec::with_capacity(n + 1);
        let mut p2s = Vec::with_capacity(n + 1);
        let mut vs = Vec::with_capacity(n);
        let mut q2s = Vec::with_capacity(n);

        let eta = t.param(&self.store, self.eta);
        let y0 = t.exp(eta);
        ys.push(t.broadcast_row(y0, b));
        p2s.push(t.constant(Mat::from_elem((b, 1), self.cfg.x0)));

        for i in 0..n {
            let coeffs = self.coeffs_at(&aux, i);
            let (v_i, q2_i) = if i == 0 {
                (self.v0.forward(t, &self.store, b), self.q20.forward(t, &self.store, b))
            } else {
                let extra = self.step_extra(&aux);
                let v_i = self.eval_v_head(t, i, ys[i], mode);
                let q2_i = self.eval_q2_head(t, i, ys[i], v_i, extra.as_ref(), mode);
                (v_i, q2_i)
            };
            vs.push(v_i);
            q2s.push(q2_i);
            let delta = self.constraint.support_delta_on_tape(t, v_i);
            let db = t.constant(noise.steps[i].clone());
            ys.push(market::step_dual_state(t, &coeffs, ys[i], v_i, delta, db, dt));
            p2s.push(market::step_dual_adjoint(t, &coeffs, p2s[i], v_i, delta, q2_i, db, dt));
            aux = self.market.step_aux(&aux, i as f64 * dt, dt, &noise.steps[i]);
        }
        DualSimulatedPaths { y: ys, p2: p2s, v: vs, q2: q2s }
    }

    /// Terminal-condition loss `E|p₂_N + Ũ'(Y_N)|²`.
    pub fn loss_bsde(&self, t: &mut Tape, y_n: ValueRef, p2_n: ValueRef) -> ValueRef {
        let target = self.utility.fenchel_prime_on_tape(t, y_n);
        let resid = t.add(p2_n, target);
        let sq = t.square(resid);
        t.mean_all(sq)
    }

    /// The dual objective `E[Ũ(Y_N)] + x₀y` — the loss that trains y, and
    /// nothing else. Routing y through this loss instead of the BSDE
    /// residual keeps its gradient informative no matter how rough the
    /// (Y, p₂) paths are: the x₀y term never vanishes, so y cannot freeze
    /// in a guard-saturated state, and for log utility the gradient is
    /// deterministic, which converges y to its optimum very quickly.
    /// `y0_rows` is the broadcast initial column of the simulation (its
    /// mean recovers y on the tape).
    pub fn loss_dual(&self, t: &mut Tape, y0_rows: ValueRef, y_n: ValueRef) -> ValueRef {
        let fen = self.utility.fenchel_on_tape(t, y_n);
        let mean_fen = t.mean_all(fen);
        let y0 = t.mean_all(y0_rows);
        let cost = t.scale(y0, self.cfg.x0);
        t.add(mean_fen, cost)
    }

    /// Stationarity loss at one time point: `E[p₂δ_K(v) + (σ⁻¹v)ᵀq₂]`.
    pub fn loss_control(
        &self,
        t: &mut Tape,
        coeffs: &Coefficients,
        p2_i: ValueRef,
        v_i: ValueRef,
        q2_i: ValueRef,
    ) -> ValueRef {
        let delta = self.constraint.support_delta_on_tape(t, v_i);
        let burden = t.mul(p2_i, delta);
        let sv = coeffs.sigma_inv_vec(t, v_i);
        let cross = t.dot_rows(sv, q2_i);
        let total = t.add(burden, cross);
        t.mean_all(total)
    }

    /// Candidate primal portfolio implied by the dual adjoint:
    /// `π̂ = h_K(p₂⁻¹(σ⁻¹)ᵀq₂)`. Rows with |p₂| below
    /// [`ADJOINT_DROP_THRESHOLD`] are flagged `true` in the second return
    /// value and get a zero portfolio (their wealth path is discarded by
    /// the bound estimator).
    pub fn candidate_control(
        &self,
        coeffs: &Coefficients,
        p2: &Mat,
        q2: &Mat,
    ) -> (Mat, Vec<bool>) {
        let mut raw = coeffs.sigma_inv_t_vec_mat(q2);
        let mut dropped = vec![false; raw.nrows()];
        for r in 0..raw.nrows() {
            let p = p2[(r, 0)];
            if p.abs() < ADJOINT_DROP_THRESHOLD {
                dropped[r] = true;
                for j in 0..raw.ncols() {
                    raw[(r, j)] = 0.0;
                }
            } else {
                for j in 0..raw.ncols() {
                    raw[(r, j)] /= p;
                }
            }
        }
        (self.constraint.h_k(&raw), dropped)
    }

    /// One two-substep training step on the given noise batch.
    pub fn training_step(&mut self, noise: &NoiseBatch) -> StepDiagnostics {
        let n = self.cfg.n_time_steps;
        let b = noise.batch();
        let dt = self.cfg.dt();

        // Substep 1: full simulation; the q₂ group steps on the BSDE
        // residual, y steps on the dual objective, both from the same
        // simulated paths.
        let (loss_bsde, bsde_outcome) = {
            let mut t = Tape::new();
            let sim = self.dual_forward(&mut t, noise, Mode::Training);
            let loss = self.loss_bsde(&mut t, sim.y[n], sim.p2[n]);
            let loss_v = t.value(loss)[(0, 0)];
            let grads = t.backward(loss);
            let outcome = self.adam_bsde.step(&mut self.store, &grads);
            let dual_obj = self.loss_dual(&mut t, sim.y[0], sim.y[n]);
            let dual_grads = t.backward(dual_obj);
            self.adam_y.step(&mut self.store, &dual_grads);
            (loss_v, outcome)
        };

        let mut control_losses = Vec::with_capacity(n);

        // Substep 2, i = 0: deterministic time point, single-row tape.
        {
            let aux0 = self.market.init_aux(1);
            let coeffs0 = self.coeffs_at(&aux0, 0);
            let mut t = Tape::new();
            let v0 = self.v0.forward(&mut t, &self.store, 1);
            let q20 = self.q20.forward(&mut t, &self.store, 1);
            let p20 = t.constant(Mat::from_elem((1, 1), self.cfg.x0));
            let loss0 = self.loss_control(&mut t, &coeffs0, p20, v0, q20);
            control_losses.push(t.value(loss0)[(0, 0)]);
            let grads = t.backward(loss0);
            self.adam_v[0].step(&mut self.store, &grads);
        }

        // Substep 2, i ≥ 1: carry (Y, p₂) forward one Euler step at a time
        // with the freshest parameter values.
        let mut aux = self.market.init_aux(b);
        let (mut v_prev, mut q2_prev) = {
            let mut t = Tape::new();
            let v0 = self.v0.forward(&mut t, &self.store, b);
            let q20 = self.q20.forward(&mut t, &self.store, b);
            (t.value(v0).clone(), t.value(q20).clone())
        };
        let mut y_val = Mat::from_elem((b, 1), self.y_value());
        let mut p2_val = Mat::from_elem((b, 1), self.cfg.x0);

        for i in 0..n.saturating_sub(1) {
            let coeffs = self.coeffs_at(&aux, i);
            {
                let mut t = Tape::new();
                let y = t.constant(y_val);
                let p2 = t.constant(p2_val);
                let v = t.constant(v_prev.clone());
                let q2 = t.constant(q2_prev.clone());
                let delta = self.constraint.support_delta_on_tape(&mut t, v);
                let db = t.constant(noise.steps[i].clone());
                let yn = market::step_dual_state(&mut t, &coeffs, y, v, delta, db, dt);
                let pn = market::step_dual_adjoint(&mut t, &coeffs, p2, v, delta, q2, db, dt);
                y_val = t.value(yn).clone();
                p2_val = t.value(pn).clone();
            }
            aux = self.market.step_aux(&aux, i as f64 * dt, dt, &noise.steps[i]);

            // Update v-head i+1 against the stationarity loss at t_{i+1}.
            let coeffs_next = self.coeffs_at(&aux, i + 1);
            let extra = self.step_extra(&aux);
            let mut t = Tape::new();
            let y_c = t.constant(y_val.clone());
            let p2_c = t.constant(p2_val.clone());
            let v_ref = self.eval_v_head(&mut t, i + 1, y_c, Mode::Training);
            let q2_ref = self.eval_q2_head(&mut t, i + 1, y_c, v_ref, extra.as_ref(), Mode::Training);
            let loss_i = self.loss_control(&mut t, &coeffs_next, p2_c, v_ref, q2_ref);
            control_losses.push(t.value(loss_i)[(0, 0)]);
            let grads = t.backward(loss_i);
            self.adam_v[i + 1].step(&mut self.store, &grads);

            // Re-evaluate v_{i+1} so the ongoing chain uses the updated head.
            let v_updated = self.eval_v_head(&mut t, i + 1, y_c, Mode::Training);
            v_prev = t.value(v_updated).clone();
            q2_prev = t.value(q2_ref).clone();
        }

        StepDiagnostics { loss_bsde, control_losses, bsde_outcome }
    }

    /// Simulates one inference-mode shard to the terminal time, carrying
    /// the dual pair (Y, p₂) and the candidate wealth X̂ driven by
    /// `π̂ = h_K(p₂⁻¹(σ⁻¹)ᵀq₂)` on the same noise.
    fn simulate_terminal_inference(&self, store: &mut ParamStore, noise: &NoiseBatch) -> DualTerminal {
        let n = self.cfg.n_time_steps;
        let b = noise.batch();
        let dt = self.cfg.dt();
        let mut aux = self.market.init_aux(b);
        let mut y_val = Mat::from_elem((b, 1), self.y_value());
        let mut p2_val = Mat::from_elem((b, 1), self.cfg.x0);
        let mut x_val = Mat::from_elem((b, 1), self.cfg.x0);
        let mut dropped = vec![false; b];

        for i in 0..n {
            let coeffs = self.coeffs_at(&aux, i);
            let mut t = Tape::new();
            let y_c = t.constant(y_val);
            let p2_c = t.constant(p2_val.clone());
            let x_c = t.constant(x_val);
            let (v_ref, q2_ref) = if i == 0 {
                (self.v0.forward(&mut t, store, b), self.q20.forward(&mut t, store, b))
            } else {
                let extra = if self.cfg.architecture.extra_q_input {
                    self.market.extra_head_input(&aux)
                } else {
                    None
                };
                let v = self.v_heads[i - 1].forward(&mut t, store, y_c, Mode::Inference);
                let mut input = y_c;
                if let Some(e) = extra {
                    let e_c = t.constant(e);
                    input = concat_cols(&mut t, input, e_c);
                }
                if self.cfg.architecture.q2_sees_control {
                    input = concat_cols(&mut t, input, v);
                }
                let q2 = self.q2_heads[i - 1].forward(&mut t, store, input, Mode::Inference);
                (v, q2)
            };
            let q2_val = t.value(q2_ref).clone();
            let (pi_hat, newly_dropped) = self.candidate_control(&coeffs, &p2_val, &q2_val);
            for (flag, fresh) in dropped.iter_mut().zip(&newly_dropped) {
                *flag |= fresh;
            }
            let pi_c = t.constant(pi_hat);
            let delta = self.constraint.support_delta_on_tape(&mut t, v_ref);
            let db = t.constant(noise.steps[i].clone());
            let yn = market::step_dual_state(&mut t, &coeffs, y_c, v_ref, delta, db, dt);
            let pn = market::step_dual_adjoint(&mut t, &coeffs, p2_c, v_ref, delta, q2_ref, db, dt);
            let xn = market::step_wealth(&mut t, &coeffs, x_c, pi_c, db, dt);
            y_val = t.value(yn).clone();
            p2_val = t.value(pn).clone();
            x_val = t.value(xn).clone();
            aux = self.market.step_aux(&aux, i as f64 * dt, dt, &noise.steps[i]);
        }
        DualTerminal { y_n: y_val, x_hat_n: x_val, dropped }
    }

    /// Monte-Carlo estimate of (Ṽ_l, Ṽ_u) over `n_mc` fresh inference-mode
    /// paths. The lower bound re-simulates wealth under the candidate
    /// portfolio on the same noise; rows whose adjoint collapses are
    /// dropped from it (and counted), while guard-fired utility rows
    /// contribute zero.
    pub fn estimate_bounds(&self, n_mc: usize, eval_ordinal: u64) -> BoundsEstimate {
        let n = self.cfg.n_time_steps;
        let m = self.market.total_dim();
        let dt = self.cfg.dt();
        let sizes = shard_sizes(n_mc);
        let shard_stats: Vec<(RunningStat, RunningStat, usize, usize)> = sizes
            .par_iter()
            .enumerate()
            .map(|(s, &rows)| {
                let mut store = self.store.clone();
                let noise = market::sample_noise(
                    self.cfg.seed,
                    eval_stream(eval_ordinal, s as u64),
                    rows,
                    m,
                    n,
                    dt,
                );
                let term = self.simulate_terminal_inference(&mut store, &noise);
                let mut lower = RunningStat::default();
                let mut upper = RunningStat::default();
                let mut guarded = 0usize;
                let mut dropped = 0usize;
                for r in 0..rows {
                    let y = term.y_n[(r, 0)];
                    if y > 0.0 {
                        upper.add(self.utility.fenchel(y));
                    } else {
                        upper.add(0.0);
                        guarded += 1;
                    }
                    if term.dropped[r] {
                        dropped += 1;
                        continue;
                    }
                    let x = term.x_hat_n[(r, 0)];
                    if x > 0.0 {
                        lower.add(self.utility.u(x));
                    } else {
                        lower.add(0.0);
                        guarded += 1;
                    }
                }
                (lower, upper, guarded, dropped)
            })
            .collect();

        let mut lower = RunningStat::default();
        let mut upper = RunningStat::default();
        let mut guarded_rows = 0usize;
        let mut dropped_rows = 0usize;
        for (l, u, g, d) in &shard_stats {
            lower.merge(l);
            upper.merge(u);
            guarded_rows += g;
            dropped_rows += d;
        }
        BoundsEstimate {
            lower: lower.mean(),
            lower_stderr: lower.stderr(),
            upper: upper.mean() + self.cfg.x0 * self.y_value(),
            upper_stderr: upper.stderr(),
            guarded_rows,
            dropped_rows,
        }
    }

    /// Runs the full training loop; mirrors the primal driver. The per-step
    /// history tracks y.
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
            let noise = market::sample_noise(self.cfg.seed, stream, b, m, n, dt);
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
                value: self.y_value(),
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
