//! Minimal reverse-mode automatic differentiation over batched `f64` matrices.
//!
//! Everything the solvers differentiate is a composition of a small, fixed set
//! of primitives on 2-d arrays (`batch x features`), so instead of pulling in
//! a full tensor framework this module keeps an eager evaluation tape: each
//! operation computes its value immediately and records one node. A single
//! [`Tape::backward`] pass then accumulates adjoints for every registered
//! parameter.
//!
//! Conventions:
//! - Values are `ndarray::Array2<f64>`. A scalar is a `1x1` matrix.
//! - Elementwise binary ops broadcast along either axis when one operand has
//!   extent 1 there (the usual outer-broadcast rule); the corresponding
//!   adjoint is summed back over the broadcast axes.
//! - Guarded primitives (`guarded_log`, `guarded_pow`) return 0 with zero
//!   derivative outside their domain, so losses stay finite when a positive
//!   quantity transiently leaves its domain during training.
//! - Shape mismatches are programming errors and panic immediately with the
//!   offending shapes; they are never silently broadcast.

use std::collections::HashMap;

use ndarray::{Array2, Axis};

/// Batched matrix value: rows index the Monte-Carlo batch, columns the feature.
pub type Mat = Array2<f64>;

/// Shape of a tape value.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn of(m: &Mat) -> Self {
        Shape { rows: m.nrows(), cols: m.ncols() }
    }

    fn broadcast_with(self, other: Shape) -> Option<Shape> {
        let rows = match (self.rows, other.rows) {
            (a, b) if a == b => a,
            (1, b) => b,
            (a, 1) => a,
            _ => return None,
        };
        let cols = match (self.cols, other.cols) {
            (a, b) if a == b => a,
            (1, b) => b,
            (a, 1) => a,
            _ => return None,
        };
        Some(Shape { rows, cols })
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct ValueRef {
    index: usize,
    pub shape: Shape,
}

/// Identifier of a trainable parameter in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone)]
struct ParamEntry {
    name: String,
    value: Mat,
}

/// Owns all trainable parameters. Tapes borrow parameter values when a
/// parameter is placed on them; optimizer updates mutate the store between
/// tape constructions.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new trainable parameter and returns its id.
    ///
    /// Panics if the initial value is empty or contains non-finite entries:
    /// a parameter born NaN would poison every later gradient silently.
    pub fn register(&mut self, name: &str, value: Mat) -> ParamId {
        assert!(
            value.nrows() > 0 && value.ncols() > 0,
            "parameter '{name}' must be non-empty, got {:?}",
            value.dim()
        );
        assert!(
            value.iter().all(|v| v.is_finite()),
            "parameter '{name}' has non-finite initial values"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), value });
        id
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> Shape {
        Shape::of(&self.entries[id.0].value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All parameter ids in registration order.
    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.entries.len()).map(ParamId).collect()
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Relu,
    Square,
    Sqrt,
    Exp,
    Sin,
    GuardedLog,
}

enum Node {
    Constant,
    Param(ParamId),
    Binary { kind: BinaryKind, a: usize, b: usize },
    Unary { kind: UnaryKind, a: usize },
    GuardedPow { a: usize, exponent: f64 },
    MatMul { a: usize, b: usize },
    BroadcastRow { a: usize },
    Transpose { a: usize },
    SumCols { a: usize },
    MeanBatch { a: usize },
    Where { cond: usize, yes: usize, no: usize },
}

/// Gradients of one scalar loss with respect to every parameter that
/// participated in the tape. Parameters that did not appear get no entry.
pub struct Gradients {
    grads: HashMap<ParamId, Mat>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(&id)
    }

    /// Gradient for `id`, or a zero matrix of the parameter's shape when the
    /// parameter was not on the tape.
    pub fn get_or_zeros(&self, store: &ParamStore, id: ParamId) -> Mat {
        match self.grads.get(&id) {
            Some(g) => g.clone(),
            None => Mat::zeros(store.value(id).dim()),
        }
    }

    /// True when every stored gradient entry is finite.
    pub fn all_finite(&self) -> bool {
        self.grads.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Eager evaluation tape. Build a computation with the primitive methods,
/// then call [`Tape::backward`] on a `1x1` loss value.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Mat>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes (useful for memory accounting in long rollouts).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Computed value of a recorded node.
    pub fn value(&self, r: ValueRef) -> &Mat {
        &self.values[r.index]
    }

    fn push(&mut self, node: Node, value: Mat) -> ValueRef {
        let shape = Shape::of(&value);
        let index = self.nodes.len();
        self.nodes.push(node);
        self.values.push(value);
        ValueRef { index, shape }
    }

    /// Places a non-trainable value on the tape. No gradient flows into it.
    pub fn constant(&mut self, value: Mat) -> ValueRef {
        self.push(Node::Constant, value)
    }

    /// A `1x1` constant.
    pub fn scalar(&mut self, v: f64) -> ValueRef {
        self.constant(Mat::from_elem((1, 1), v))
    }

    /// Places the current value of a trainable parameter on the tape.
    /// Gradients from [`Tape::backward`] accumulate into its [`ParamId`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> ValueRef {
        self.push(Node::Param(id), store.value(id).clone())
    }

    fn binary(&mut self, kind: BinaryKind, a: ValueRef, b: ValueRef) -> ValueRef {
        let shape = a.shape.broadcast_with(b.shape).unwrap_or_else(|| {
            panic!("{kind:?}: incompatible shapes {:?} and {:?}", a.shape, b.shape)
        });
        let va = &self.values[a.index];
        let vb = &self.values[b.index];
        let mut out = Mat::zeros((shape.rows, shape.cols));
        for i in 0..shape.rows {
            let ia = if a.shape.rows == 1 { 0 } else { i };
            let ib = if b.shape.rows == 1 { 0 } else { i };
            for j in 0..shape.cols {
                let ja = if a.shape.cols == 1 { 0 } else { j };
                let jb = if b.shape.cols == 1 { 0 } else { j };
                let x = va[(ia, ja)];
                let y = vb[(ib, jb)];
                out[(i, j)] = match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                };
            }
        }
        self.push(Node::Binary { kind, a: a.index, b: b.index }, out)
    }

    /// Elementwise sum with outer broadcasting.
    pub fn add(&mut self, a: ValueRef, b: ValueRef) -> ValueRef {
        self.binary(BinaryKind::Add, a, b)
    }

    /// Elementwise difference with outer broadcasting.
    pub fn sub(&mut self, a: ValueRef, b: ValueRef) -> ValueRef {
        self.binary(BinaryKind::Sub, a, b)
    }

    /// Elementwise product with outer broadcasting.
    pub fn mul(&mut self, a: ValueRef, b: ValueRef) -> ValueRef {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Elementwise quotient with outer broadcasting. The caller is
    /// responsible for keeping the denominator away from zero.
    pub fn div(&mut self, a: ValueRef, b: ValueRef) -> ValueRef {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: ValueRef) -> ValueRef {
        let va = &self.values[a.index];
        let out = match kind {
            UnaryKind::Relu => va.mapv(|x| x.max(0.0)),
            UnaryKind::Square => va.mapv(|x| x * x),
            UnaryKind::Sqrt => va.mapv(f64::sqrt),
            UnaryKind::Exp => va.mapv(f64::exp),
            UnaryKind::Sin => va.mapv(f64::sin),
            UnaryKind::GuardedLog => va.mapv(|x| if x > 0.0 { x.ln() } else { 0.0 }),
        };
        self.push(Node::Unary { kind, a: a.index }, out)
    }

    /// max(x, 0), elementwise.
    pub fn relu(&mut self, a: ValueRef) -> ValueRef {
        self.unary(UnaryKind::Relu, a)
    }

    /// x^2, elementwise.
    pub fn square(&mut self, a: ValueRef) -> ValueRef {
        self.unary(UnaryKind::Square, a)
    }

    /// sqrt(x), elementwise. Domain x >= 0; negative inputs produce NaN,
    /// which downstream non-finite checks will catch.
    pub fn sqrt(&mut self, a: ValueRef) -> ValueRef {
        self.unary(UnaryKind::Sqrt, a)
    }

    /// e^x, elementwise.
    pub fn exp(&mut self, a: ValueRef) -> ValueRef {
        self.unary(UnaryKind::Exp, a)
    }

    /// sin(x), elementwise.
    pub fn sin(&mut self, a: ValueRef) -> ValueRef {
        self.unary(UnaryKind::Sin, a)
    }

    /// ln(x) for x > 0, and 0 with zero derivative otherwise.
    pub fn guarded_log(&mut self, a: ValueRef) -> ValueRef {
        self.unary(UnaryKind::GuardedLog, a)
    }

    /// x^c for x > 0, and 0 with zero derivative otherwise. The exponent is
    /// a fixed constant, not a differentiable input.
    pub fn guarded_pow(&mut self, a: ValueRef, exponent: f64) -> ValueRef {
        let va = &self.values[a.index];
        let out = va.mapv(|x| if x > 0.0 { x.powf(exponent) } else { 0.0 });
        self.push(Node::GuardedPow { a: a.index, exponent }, out)
    }

    /// Matrix product `a @ b`.
    pub fn matmul(&mut self, a: ValueRef, b: ValueRef) -> ValueRef {
        assert_eq!(
            a.shape.cols, b.shape.rows,
            "matmul: inner dimensions disagree, {:?} @ {:?}",
            a.shape, b.shape
        );
        let out = self.values[a.index].dot(&self.values[b.index]);
        self.push(Node::MatMul { a: a.index, b: b.index }, out)
    }

    /// Tiles a `1xC` row to `rows x C`. The adjoint sums back over the batch.
    pub fn broadcast_row(&mut self, a: ValueRef, rows: usize) -> ValueRef {
        assert_eq!(a.shape.rows, 1, "broadcast_row: input must be 1xC, got {:?}", a.shape);
        let va = &self.values[a.index];
        let mut out = Mat::zeros((rows, a.shape.cols));
        for i in 0..rows {
            out.row_mut(i).assign(&va.row(0));
        }
        self.push(Node::BroadcastRow { a: a.index }, out)
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, a: ValueRef) -> ValueRef {
        let out = self.values[a.index].t().to_owned();
        self.push(Node::Transpose { a: a.index }, out)
    }

    /// Row sums: `BxC -> Bx1`.
    pub fn sum_cols(&mut self, a: ValueRef) -> ValueRef {
        let va = &self.values[a.index];
        let sums = va.sum_axis(Axis(1));
        let out = sums.insert_axis(Axis(1));
        self.push(Node::SumCols { a: a.index }, out)
    }

    /// Column means over the batch: `BxC -> 1xC`.
    pub fn mean_batch(&mut self, a: ValueRef) -> ValueRef {
        let va = &self.values[a.index];
        let rows = a.shape.rows as f64;
        let means = va.sum_axis(Axis(0)).mapv(|v| v / rows);
        let out = means.insert_axis(Axis(0));
        self.push(Node::MeanBatch { a: a.index }, out)
    }

    /// Elementwise select: `cond > 0 ? yes : no`. `yes` and `no` broadcast to
    /// the shape of `cond`; no gradient flows into `cond`.
    pub fn select_where(&mut self, cond: ValueRef, yes: ValueRef, no: ValueRef) -> ValueRef {
        let shape = cond.shape;
        for (label, v) in [("yes", yes), ("no", no)] {
            let ok = v.shape.broadcast_with(shape) == Some(shape);
            assert!(ok, "select_where: {label} branch {:?} does not broadcast to {shape:?}", v.shape);
        }
        let vc = &self.values[cond.index];
        let vy = &self.values[yes.index];
        let vn = &self.values[no.index];
        let mut out = Mat::zeros((shape.rows, shape.cols));
        for i in 0..shape.rows {
            let iy = if yes.shape.rows == 1 { 0 } else { i };
            let inn = if no.shape.rows == 1 { 0 } else { i };
            for j in 0..shape.cols {
                let jy = if yes.shape.cols == 1 { 0 } else { j };
                let jn = if no.shape.cols == 1 { 0 } else { j };
                out[(i, j)] = if vc[(i, j)] > 0.0 { vy[(iy, jy)] } else { vn[(inn, jn)] };
            }
        }
        self.push(
            Node::Where { cond: cond.index, yes: yes.index, no: no.index },
            out,
        )
    }

    // ---- composite conveniences (pure compositions, no new adjoint rules) ----

    /// Multiplies by a scalar constant.
    pub fn scale(&mut self, a: ValueRef, c: f64) -> ValueRef {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    /// Adds a scalar constant.
    pub fn add_scalar(&mut self, a: ValueRef, c: f64) -> ValueRef {
        let s = self.scalar(c);
        self.add(a, s)
    }

    /// Row-wise inner product of two `BxC` values: `Bx1`.
    pub fn dot_rows(&mut self, a: ValueRef, b: ValueRef) -> ValueRef {
        let prod = self.mul(a, b);
        self.sum_cols(prod)
    }

    /// Mean of all entries: `1x1`. For a `Bx1` value this is the batch mean.
    pub fn mean_all(&mut self, a: ValueRef) -> ValueRef {
        let per_col = self.mean_batch(a);
        if per_col.shape.cols == 1 {
            return per_col;
        }
        let summed = self.sum_cols(per_col);
        self.scale(summed, 1.0 / a.shape.cols as f64)
    }

    /// Accumulates `g`, reduced back over any broadcast axes, into `slot`.
    fn accumulate(slot: &mut Option<Mat>, g: Mat, target: Shape) {
        let mut g = g;
        if target.rows == 1 && g.nrows() > 1 {
            g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        if target.cols == 1 && g.ncols() > 1 {
            g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
        }
        debug_assert_eq!(Shape::of(&g), target);
        match slot {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    /// Broadcast-aware elementwise combine used by the backward rules: applies
    /// `f(gradient, a_entry, b_entry)` at the broadcast shape of `g`.
    fn spread(g: &Mat, a: &Mat, b: &Mat, f: impl Fn(f64, f64, f64) -> f64) -> Mat {
        let (rows, cols) = g.dim();
        let mut out = Mat::zeros((rows, cols));
        for i in 0..rows {
            let ia = if a.nrows() == 1 { 0 } else { i };
            let ib = if b.nrows() == 1 { 0 } else { i };
            for j in 0..cols {
                let ja = if a.ncols() == 1 { 0 } else { j };
                let jb = if b.ncols() == 1 { 0 } else { j };
                out[(i, j)] = f(g[(i, j)], a[(ia, ja)], b[(ib, jb)]);
            }
        }
        out
    }

    /// Reverse pass from a `1x1` loss. Returns the accumulated gradient for
    /// every parameter that participated in this tape. Repeated placements of
    /// the same parameter sum their contributions.
    pub fn backward(&self, loss: ValueRef) -> Gradients {
        assert_eq!(
            (loss.shape.rows, loss.shape.cols),
            (1, 1),
            "backward: loss must be 1x1, got {:?}",
            loss.shape
        );
        let mut adjoints: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[loss.index] = Some(Mat::from_elem((1, 1), 1.0));
        let mut grads: HashMap<ParamId, Mat> = HashMap::new();

        for idx in (0..=loss.index).rev() {
            let Some(g) = adjoints[idx].take() else { continue };
            match &self.nodes[idx] {
                Node::Constant => {}
                Node::Param(id) => match grads.get_mut(id) {
                    Some(acc) => *acc += &g,
                    None => {
                        grads.insert(*id, g);
                    }
                },
                Node::Binary { kind, a, b } => {
                    let (a, b) = (*a, *b);
                    let sa = Shape::of(&self.values[a]);
                    let sb = Shape::of(&self.values[b]);
                    let va = &self.values[a];
                    let vb = &self.values[b];
                    let (ga, gb) = match kind {
                        BinaryKind::Add => (
                            Self::spread(&g, va, vb, |g, _, _| g),
                            Self::spread(&g, va, vb, |g, _, _| g),
                        ),
                        BinaryKind::Sub => (
                            Self::spread(&g, va, vb, |g, _, _| g),
                            Self::spread(&g, va, vb, |g, _, _| -g),
                        ),
                        BinaryKind::Mul => (
                            Self::spread(&g, va, vb, |g, _, y| g * y),
                            Self::spread(&g, va, vb, |g, x, _| g * x),
                        ),
                        BinaryKind::Div => (
                            Self::spread(&g, va, vb, |g, _, y| g / y),
                            Self::spread(&g, va, vb, |g, x, y| -g * x / (y * y)),
                        ),
                    };
                    Self::accumulate(&mut adjoints[a], ga, sa);
                    Self::accumulate(&mut adjoints[b], gb, sb);
                }
                Node::Unary { kind, a } => {
                    let a = *a;
                    let va = &self.values[a];
                    let vout = &self.values[idx];
                    let ga = match kind {
                        UnaryKind::Relu => {
                            let mut d = g.clone();
                            d.zip_mut_with(va, |gi, &x| {
                                if x <= 0.0 {
                                    *gi = 0.0;
                                }
                            });
                            d
                        }
                        UnaryKind::Square => {
                            let mut d = g.clone();
                            d.zip_mut_with(va, |gi, &x| *gi *= 2.0 * x);
                            d
                        }
                        UnaryKind::Sqrt => {
                            let mut d = g.clone();
                            d.zip_mut_with(vout, |gi, &s| *gi *= 0.5 / s);
                            d
                        }
                        UnaryKind::Exp => {
                            let mut d = g.clone();
                            d.zip_mut_with(vout, |gi, &e| *gi *= e);
                            d
                        }
                        UnaryKind::Sin => {
                            let mut d = g.clone();
                            d.zip_mut_with(va, |gi, &x| *gi *= x.cos());
                            d
                        }
                        UnaryKind::GuardedLog => {
                            let mut d = g.clone();
                            d.zip_mut_with(va, |gi, &x| {
                                *gi = if x > 0.0 { *gi / x } else { 0.0 }
                            });
                            d
                        }
                    };
                    let sa = Shape::of(va);
                    Self::accumulate(&mut adjoints[a], ga, sa);
                }
                Node::GuardedPow { a, exponent } => {
                    let a = *a;
                    let c = *exponent;
                    let va = &self.values[a];
                    let mut d = g.clone();
                    d.zip_mut_with(va, |gi, &x| {
                        *gi = if x > 0.0 { *gi * c * x.powf(c - 1.0) } else { 0.0 }
                    });
                    let sa = Shape::of(va);
                    Self::accumulate(&mut adjoints[a], d, sa);
                }
                Node::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let ga = g.dot(&self.values[b].t());
                    let gb = self.values[a].t().dot(&g);
                    let sa = Shape::of(&self.values[a]);
                    let sb = Shape::of(&self.values[b]);
                    Self::accumulate(&mut adjoints[a], ga, sa);
                    Self::accumulate(&mut adjoints[b], gb, sb);
                }
                Node::BroadcastRow { a } => {
                    let a = *a;
                    let ga = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let sa = Shape::of(&self.values[a]);
                    Self::accumulate(&mut adjoints[a], ga, sa);
                }
                Node::Transpose { a } => {
                    let a = *a;
                    let ga = g.t().to_owned();
                    let sa = Shape::of(&self.values[a]);
                    Self::accumulate(&mut adjoints[a], ga, sa);
                }
                Node::SumCols { a } => {
                    let a = *a;
                    let sa = Shape::of(&self.values[a]);
                    let mut ga = Mat::zeros((sa.rows, sa.cols));
                    for i in 0..sa.rows {
                        let gi = g[(i, 0)];
                        for j in 0..sa.cols {
                            ga[(i, j)] = gi;
                        }
                    }
                    Self::accumulate(&mut adjoints[a], ga, sa);
                }
                Node::MeanBatch { a } => {
                    let a = *a;
                    let sa = Shape::of(&self.values[a]);
                    let scale = 1.0 / sa.rows as f64;
                    let mut ga = Mat::zeros((sa.rows, sa.cols));
                    for i in 0..sa.rows {
                        for j in 0..sa.cols {
                            ga[(i, j)] = g[(0, j)] * scale;
                        }
                    }
                    Self::accumulate(&mut adjoints[a], ga, sa);
                }
                Node::Where { cond, yes, no } => {
                    let (cond, yes, no) = (*cond, *yes, *no);
                    let vc = &self.values[cond];
                    let (rows, cols) = g.dim();
                    let mut gyes = Mat::zeros((rows, cols));
                    let mut gno = Mat::zeros((rows, cols));
                    for i in 0..rows {
                        for j in 0..cols {
                            if vc[(i, j)] > 0.0 {
                                gyes[(i, j)] = g[(i, j)];
                            } else {
                                gno[(i, j)] = g[(i, j)];
                            }
                        }
                    }
                    let sy = Shape::of(&self.values[yes]);
                    let sn = Shape::of(&self.values[no]);
                    Self::accumulate(&mut adjoints[yes], gyes, sy);
                    Self::accumulate(&mut adjoints[no], gno, sn);
                }
            }
        }
        Gradients { grads }
    }
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `f` rebuilds the loss from scratch on the tape it is handed; it is called
/// once for the analytic pass and twice per parameter coordinate for the
/// difference quotients. The store is passed mutably so that stateful layers
/// (batch-norm running statistics) can run their usual bookkeeping — the
/// checked loss value must not depend on that state across calls. Returns
/// the largest relative error `|ad - fd| / max(1, |fd|)` over every
/// coordinate of every parameter in `params`.
pub fn grad_check<F>(store: &mut ParamStore, params: &[ParamId], h: f64, mut f: F) -> f64
where
    F: FnMut(&mut Tape, &mut ParamStore) -> ValueRef,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store);
    let grads = tape.backward(loss);

    let eval = |store: &mut ParamStore, f: &mut F| -> f64 {
        let mut t = Tape::new();
        let l = f(&mut t, store);
        t.value(l)[(0, 0)]
    };

    let mut worst: f64 = 0.0;
    for &pid in params {
        let g_ad = grads.get_or_zeros(store, pid);
        let (rows, cols) = store.value(pid).dim();
        for i in 0..rows {
            for j in 0..cols {
                let orig = store.value(pid)[(i, j)];
                store.value_mut(pid)[(i, j)] = orig + h;
                let up = eval(store, &mut f);
                store.value_mut(pid)[(i, j)] = orig - h;
                let down = eval(store, &mut f);
                store.value_mut(pid)[(i, j)] = orig;
                let fd = (up - down) / (2.0 * h);
                let err = (g_ad[(i, j)] - fd).abs() / fd.abs().max(1.0);
                worst = worst.max(err);
            }
        }
    }
    worst
}

/// One named entry of a gradient-verification suite.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub error: f64,
}

/// Runs a central-difference check of every tape primitive through a scalar
/// reduction, with randomized operands. Returns one entry per primitive;
/// all errors should sit far below the 1e-4 acceptance line.
pub fn primitive_suite(seed: u64) -> Vec<SuiteEntry> {
    use rand::Rng;
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut rand_mat = |rows: usize, cols: usize, lo: f64, hi: f64| {
        Mat::from_shape_fn((rows, cols), |_| rng.gen_range(lo..hi))
    };

    let mut store = ParamStore::new();
    // Strictly positive operand so sqrt/log/pow/div sit inside their smooth
    // domains; a signed operand exercises the rest.
    let pos = store.register("pos", rand_mat(3, 4, 0.5, 1.5));
    let signed = store.register("signed", rand_mat(3, 4, -1.0, 1.0));
    let weights = store.register("weights", rand_mat(4, 2, -0.8, 0.8));
    let row = store.register("row", rand_mat(1, 4, -0.5, 0.5));
    let ids = [pos, signed, weights, row];

    type Build = fn(&mut Tape, &ParamStore, [ParamId; 4]) -> ValueRef;
    let cases: Vec<(&str, Build)> = vec![
        ("add", |t, s, [p, q, _, r]| {
            let (a, b, c) = (t.param(s, p), t.param(s, q), t.param(s, r));
            let x = t.add(a, b);
            let y = t.add(x, c);
            t.mean_all(y)
        }),
        ("sub", |t, s, [p, q, _, _]| {
            let (a, b) = (t.param(s, p), t.param(s, q));
            let x = t.sub(a, b);
            let sq = t.square(x);
            t.mean_all(sq)
        }),
        ("mul_broadcast", |t, s, [p, _, _, r]| {
            let (a, c) = (t.param(s, p), t.param(s, r));
            let x = t.mul(a, c);
            t.mean_all(x)
        }),
        ("div", |t, s, [p, q, _, _]| {
            let (a, b) = (t.param(s, q), t.param(s, p));
            let x = t.div(a, b);
            t.mean_all(x)
        }),
        ("matmul", |t, s, [p, _, w, _]| {
            let (a, b) = (t.param(s, p), t.param(s, w));
            let x = t.matmul(a, b);
            let sq = t.square(x);
            t.mean_all(sq)
        }),
        ("broadcast_row", |t, s, [_, _, _, r]| {
            let c = t.param(s, r);
            let x = t.broadcast_row(c, 5);
            let sq = t.square(x);
            t.mean_all(sq)
        }),
        ("transpose", |t, s, [p, _, _, _]| {
            let a = t.param(s, p);
            let x = t.transpose(a);
            let sq = t.square(x);
            t.mean_all(sq)
        }),
        ("relu", |t, s, [_, q, _, _]| {
            let a = t.param(s, q);
            let x = t.relu(a);
            t.mean_all(x)
        }),
        ("square", |t, s, [_, q, _, _]| {
            let a = t.param(s, q);
            let x = t.square(a);
            t.mean_all(x)
        }),
        ("sqrt", |t, s, [p, _, _, _]| {
            let a = t.param(s, p);
            let x = t.sqrt(a);
            t.mean_all(x)
        }),
        ("exp", |t, s, [_, q, _, _]| {
            let a = t.param(s, q);
            let x = t.exp(a);
            t.mean_all(x)
        }),
        ("sin", |t, s, [_, q, _, _]| {
            let a = t.param(s, q);
            let x = t.sin(a);
            t.mean_all(x)
        }),
        ("guarded_log", |t, s, [p, _, _, _]| {
            let a = t.param(s, p);
            let x = t.guarded_log(a);
            t.mean_all(x)
        }),
        ("guarded_pow", |t, s, [p, _, _, _]| {
            let a = t.param(s, p);
            let x = t.guarded_pow(a, -1.5);
            t.mean_all(x)
        }),
        ("sum_cols", |t, s, [p, _, _, _]| {
            let a = t.param(s, p);
            let x = t.sum_cols(a);
            let sq = t.square(x);
            t.mean_all(sq)
        }),
        ("mean_batch", |t, s, [p, _, _, _]| {
            let a = t.param(s, p);
            let x = t.mean_batch(a);
            let sq = t.square(x);
            t.mean_all(sq)
        }),
        ("select_where", |t, s, [p, q, _, r]| {
            let cond = t.param(s, q);
            let (a, c) = (t.param(s, p), t.param(s, r));
            let x = t.select_where(cond, a, c);
            t.mean_all(x)
        }),
    ];

    cases
        .into_iter()
        .map(|(name, build)| {
            let error = grad_check(&mut store, &ids, 1e-4, |t, s| build(t, s, ids));
            SuiteEntry { name: format!("primitive/{name}"), error }
        })
        .collect()
}
