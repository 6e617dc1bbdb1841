//! Reverse-mode automatic differentiation over flat f32 buffers.
//!
//! The design is a Wengert list: every tracked value is a node on a [`Tape`],
//! ops append nodes eagerly during the forward pass, and [`Tensor::backward`]
//! replays the list in reverse, accumulating gradients per node. Only the op
//! set needed by embedding models and rank-targeted perturbation losses is
//! provided; shapes are 1-D or 2-D row-major.
//!
//! Conventions that callers rely on:
//!
//! - Constants (tensors never registered on a tape) take part in any op and
//!   never receive gradients.
//! - Gradients at kinks are zero: `relu` and `clamp` at their boundary
//!   points, `sqrt` and row norms at zero.
//! - Reductions (`sum`, `mean`, `l2_norm_rows`, `dot_rows`) accumulate in
//!   f64 before rounding back to f32.
//! - Forward results are bitwise deterministic for identical inputs; no op
//!   is threaded.
//!
//! Shape mismatches, cross-tape operands, and `backward` on a non-scalar are
//! programmer errors and panic with a message carrying the offending shapes.
//! A `Tape` and its tensors are confined to one thread; independent tapes on
//! different threads share nothing.

mod kernels;

use std::cell::RefCell;
use std::rc::Rc;

pub use kernels::{matmul_nn, matmul_nt, matmul_tn};

/// Flat f32 value with an optional handle onto the tape that produced it.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f32>>,
    node: Option<(Tape, usize)>,
}

/// Recording of a differentiable computation.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Op>,
    grads: Vec<Option<Vec<f32>>>,
}

/// Operand snapshot: value plus its node id when it lives on the same tape.
struct Src {
    data: Rc<Vec<f32>>,
    shape: Vec<usize>,
    node: Option<usize>,
}

enum Op {
    Leaf,
    Add(Src, Src),
    Sub(Src, Src),
    Mul(Src, Src),
    Div(Src, Src),
    Matmul { a: Src, b: Src, m: usize, k: usize, n: usize },
    Relu(Src),
    Clamp { x: Src, lo: f32, hi: f32 },
    Sqrt { x: Src, out: Rc<Vec<f32>> },
    Scale { x: Src, c: f32 },
    Offset(Src),
    Sum(Src),
    Mean(Src),
    L2NormRows { x: Src, out: Rc<Vec<f32>> },
    DotRows(Src, Src),
    BroadcastRows { x: Src, reps: usize },
    SelectRows { x: Src, idx: Vec<usize> },
}

/// How a binary elementwise op lines its operands up.
#[derive(Clone, Copy, PartialEq, Debug)]
enum Pairing {
    Same,
    LeftScalar,
    RightScalar,
    LeftRow,
    RightRow,
}

/// How one operand of an elementwise op was expanded to the output shape.
#[derive(Clone, Copy)]
enum Expand {
    Full,
    Scalar,
    Row,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn is_scalar(shape: &[usize]) -> bool {
    numel(shape) == 1
}

/// Decide operand alignment for elementwise ops, or panic.
///
/// Supported: identical shapes, one-element operands against anything, and a
/// row vector (`[n]` or `[1,n]`) against a matrix `[m,n]`.
fn pairing(op: &str, a: &[usize], b: &[usize]) -> Pairing {
    let row_len = |s: &[usize]| match s {
        [n] | [1, n] => Some(*n),
        _ => None,
    };
    if a == b || row_len(a).is_some() && row_len(a) == row_len(b) {
        return Pairing::Same;
    }
    if is_scalar(a) {
        return Pairing::LeftScalar;
    }
    if is_scalar(b) {
        return Pairing::RightScalar;
    }
    if a.len() == 2 && numel(b) == a[1] {
        return Pairing::RightRow;
    }
    if b.len() == 2 && numel(a) == b[1] {
        return Pairing::LeftRow;
    }
    panic!("{op}: incompatible shapes {a:?} and {b:?}");
}

fn expansion(pair: Pairing, left: bool) -> Expand {
    match (pair, left) {
        (Pairing::LeftScalar, true) | (Pairing::RightScalar, false) => Expand::Scalar,
        (Pairing::LeftRow, true) | (Pairing::RightRow, false) => Expand::Row,
        _ => Expand::Full,
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { inner: Rc::new(RefCell::new(TapeInner::default())) }
    }

    /// Register a value as a gradient sink. The returned tensor tracks
    /// gradients; the argument is consumed as the initial value.
    pub fn leaf(&self, data: Vec<f32>, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            numel(&shape),
            data.len(),
            "leaf: shape {shape:?} does not cover {} elements",
            data.len()
        );
        let id = self.push(Op::Leaf);
        Tensor { shape, data: Rc::new(data), node: Some((self.clone(), id)) }
    }

    /// Tracked copy of an existing tensor's value.
    pub fn leaf_from(&self, t: &Tensor) -> Tensor {
        self.leaf(t.data.as_ref().clone(), t.shape.clone())
    }

    fn push(&self, op: Op) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(op);
        inner.grads.push(None);
        inner.nodes.len() - 1
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tensor {
    // ── Construction and access ─────────────────────────────────────────

    pub fn from_vec(data: Vec<f32>, shape: Vec<usize>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "from_vec: shape {shape:?} does not cover {} elements",
            data.len()
        );
        Tensor { shape, data: Rc::new(data), node: None }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::from_vec(vec![v], vec![1])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor::from_vec(vec![0.0; n], shape)
    }

    /// One row of a 2-D tensor as a fresh `[1,n]` constant.
    pub fn row(&self, i: usize) -> Tensor {
        assert_eq!(self.shape.len(), 2, "row: tensor is {:?}, want 2-D", self.shape);
        let n = self.shape[1];
        Tensor::from_vec(self.data[i * n..(i + 1) * n].to_vec(), vec![1, n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item: tensor has shape {:?}", self.shape);
        self.data[0]
    }

    /// Whether gradients will flow to this tensor on backward.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Gradient accumulated by the latest `backward` on this tensor's tape.
    /// `None` for constants and for tensors the loss does not reach.
    pub fn grad(&self) -> Option<Vec<f32>> {
        let (tape, id) = self.node.as_ref()?;
        tape.inner.borrow().grads[*id].clone()
    }

    fn src(&self) -> Src {
        Src {
            data: Rc::clone(&self.data),
            shape: self.shape.clone(),
            node: self.node.as_ref().map(|(_, id)| *id),
        }
    }

    /// Tape shared by `self` and `other`, if either is tracked. Panics when
    /// both are tracked on different tapes.
    fn join_tape(&self, other: &Tensor, op: &str) -> Option<Tape> {
        match (&self.node, &other.node) {
            (Some((ta, _)), Some((tb, _))) => {
                assert!(ta.same_tape(tb), "{op}: operands recorded on different tapes");
                Some(ta.clone())
            }
            (Some((t, _)), None) | (None, Some((t, _))) => Some(t.clone()),
            (None, None) => None,
        }
    }

    fn own_tape(&self) -> Option<Tape> {
        self.node.as_ref().map(|(t, _)| t.clone())
    }

    fn emit(&self, tape: Option<Tape>, op: Op, data: Vec<f32>, shape: Vec<usize>) -> Tensor {
        match tape {
            Some(tape) => {
                let id = tape.push(op);
                Tensor { shape, data: Rc::new(data), node: Some((tape, id)) }
            }
            None => Tensor { shape, data: Rc::new(data), node: None },
        }
    }

    // ── Elementwise binary ops ──────────────────────────────────────────

    fn binary(
        &self,
        rhs: &Tensor,
        name: &str,
        f: impl Fn(f32, f32) -> f32,
        record: impl FnOnce(Src, Src) -> Op,
    ) -> Tensor {
        let pair = pairing(name, &self.shape, &rhs.shape);
        let (data, shape) = ew_forward(pair, &self.data, &self.shape, &rhs.data, &rhs.shape, f);
        let tape = self.join_tape(rhs, name);
        self.emit(tape, record(self.src(), rhs.src()), data, shape)
    }

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, "div", |x, y| x / y, Op::Div)
    }

    // ── Matrix product ──────────────────────────────────────────────────

    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        assert!(
            self.shape.len() == 2 && rhs.shape.len() == 2 && self.shape[1] == rhs.shape[0],
            "matmul: incompatible shapes {:?} and {:?}",
            self.shape,
            rhs.shape
        );
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let data = kernels::matmul_nn(&self.data, &rhs.data, m, k, n);
        let tape = self.join_tape(rhs, "matmul");
        self.emit(tape, Op::Matmul { a: self.src(), b: rhs.src(), m, k, n }, data, vec![m, n])
    }

    // ── Elementwise unary ops ───────────────────────────────────────────

    pub fn relu(&self) -> Tensor {
        let data = self.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        self.emit(self.own_tape(), Op::Relu(self.src()), data, self.shape.clone())
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        assert!(lo <= hi, "clamp: lo {lo} > hi {hi}");
        let data = self.data.iter().map(|&v| v.clamp(lo, hi)).collect();
        self.emit(self.own_tape(), Op::Clamp { x: self.src(), lo, hi }, data, self.shape.clone())
    }

    pub fn sqrt(&self) -> Tensor {
        let data: Vec<f32> = self.data.iter().map(|&v| v.sqrt()).collect();
        let out = Rc::new(data.clone());
        self.emit(self.own_tape(), Op::Sqrt { x: self.src(), out }, data, self.shape.clone())
    }

    pub fn scale(&self, c: f32) -> Tensor {
        let data = self.data.iter().map(|&v| v * c).collect();
        self.emit(self.own_tape(), Op::Scale { x: self.src(), c }, data, self.shape.clone())
    }

    pub fn offset(&self, c: f32) -> Tensor {
        let data = self.data.iter().map(|&v| v + c).collect();
        self.emit(self.own_tape(), Op::Offset(self.src()), data, self.shape.clone())
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum(&self) -> Tensor {
        let s = kernels::sum_f64(&self.data) as f32;
        self.emit(self.own_tape(), Op::Sum(self.src()), vec![s], vec![1])
    }

    pub fn mean(&self) -> Tensor {
        assert!(!self.data.is_empty(), "mean: empty tensor");
        let s = (kernels::sum_f64(&self.data) / self.data.len() as f64) as f32;
        self.emit(self.own_tape(), Op::Mean(self.src()), vec![s], vec![1])
    }

    /// Euclidean norm of each row of a 2-D tensor; `[m,n] -> [m]`.
    pub fn l2_norm_rows(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "l2_norm_rows: tensor is {:?}, want 2-D", self.shape);
        let (m, n) = (self.shape[0], self.shape[1]);
        let data: Vec<f32> = (0..m)
            .map(|i| kernels::sq_norm_f64(&self.data[i * n..(i + 1) * n]).sqrt() as f32)
            .collect();
        let out = Rc::new(data.clone());
        self.emit(self.own_tape(), Op::L2NormRows { x: self.src(), out }, data, vec![m])
    }

    /// Row-wise dot product of two same-shape 2-D tensors; `[m,n] -> [m]`.
    pub fn dot_rows(&self, rhs: &Tensor) -> Tensor {
        assert!(
            self.shape.len() == 2 && self.shape == rhs.shape,
            "dot_rows: incompatible shapes {:?} and {:?}",
            self.shape,
            rhs.shape
        );
        let (m, n) = (self.shape[0], self.shape[1]);
        let data: Vec<f32> = (0..m)
            .map(|i| {
                kernels::dot_f64(&self.data[i * n..(i + 1) * n], &rhs.data[i * n..(i + 1) * n])
                    as f32
            })
            .collect();
        let tape = self.join_tape(rhs, "dot_rows");
        self.emit(tape, Op::DotRows(self.src(), rhs.src()), data, vec![m])
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    /// Repeat a row vector (`[n]` or `[1,n]`) into `[reps, n]`.
    pub fn broadcast_rows(&self, reps: usize) -> Tensor {
        let n = match self.shape.as_slice() {
            [n] => *n,
            [1, n] => *n,
            s => panic!("broadcast_rows: tensor is {s:?}, want a row vector"),
        };
        let mut data = Vec::with_capacity(reps * n);
        for _ in 0..reps {
            data.extend_from_slice(&self.data);
        }
        self.emit(self.own_tape(), Op::BroadcastRows { x: self.src(), reps }, data, vec![reps, n])
    }

    /// Gather rows of a 2-D tensor; duplicate indices allowed.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        assert_eq!(self.shape.len(), 2, "select_rows: tensor is {:?}, want 2-D", self.shape);
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            assert!(i < m, "select_rows: row {i} out of bounds for {m} rows");
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        self.emit(
            self.own_tape(),
            Op::SelectRows { x: self.src(), idx: idx.to_vec() },
            data,
            vec![idx.len(), n],
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Every tracked tensor the loss
    /// depends on gets its gradient populated; constants are untouched.
    /// Panics if this tensor is not on a tape or not a one-element tensor.
    pub fn backward(&self) {
        let (tape, loss_id) = self
            .node
            .as_ref()
            .expect("backward: tensor is not recorded on a tape");
        assert!(
            is_scalar(&self.shape),
            "backward: loss must be scalar, got shape {:?}",
            self.shape
        );
        let inner = tape.inner.borrow();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; inner.nodes.len()];
        grads[*loss_id] = Some(vec![1.0]);
        for id in (0..=*loss_id).rev() {
            // Inputs always precede outputs, so grads[id] is final here.
            let Some(g) = grads[id].take() else { continue };
            backward_op(&inner.nodes[id], &mut grads, &g);
            grads[id] = Some(g);
        }
        drop(inner);
        tape.inner.borrow_mut().grads = grads;
    }
}

/// Apply one node's vector-Jacobian product, accumulating into input slots.
fn backward_op(op: &Op, grads: &mut [Option<Vec<f32>>], g: &[f32]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => ew_backward(a, b, g, grads, |_, _| 1.0, |_, _| 1.0),
        Op::Sub(a, b) => ew_backward(a, b, g, grads, |_, _| 1.0, |_, _| -1.0),
        Op::Mul(a, b) => ew_backward(a, b, g, grads, |_, bv| bv, |av, _| av),
        Op::Div(a, b) => {
            ew_backward(a, b, g, grads, |_, bv| 1.0 / bv, |av, bv| -av / (bv * bv))
        }
        Op::Matmul { a, b, m, k, n } => {
            if a.node.is_some() {
                accumulate(grads, a.node, kernels::matmul_nt(g, &b.data, *m, *n, *k));
            }
            if b.node.is_some() {
                accumulate(grads, b.node, kernels::matmul_tn(&a.data, g, *m, *k, *n));
            }
        }
        Op::Relu(x) => {
            if x.node.is_some() {
                let gx = x
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, x.node, gx);
            }
        }
        Op::Clamp { x, lo, hi } => {
            if x.node.is_some() {
                let gx = x
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > *lo && v < *hi { gv } else { 0.0 })
                    .collect();
                accumulate(grads, x.node, gx);
            }
        }
        Op::Sqrt { x, out } => {
            if x.node.is_some() {
                let gx = out
                    .iter()
                    .zip(g)
                    .map(|(&r, &gv)| if r > 0.0 { gv * 0.5 / r } else { 0.0 })
                    .collect();
                accumulate(grads, x.node, gx);
            }
        }
        Op::Scale { x, c } => {
            if x.node.is_some() {
                accumulate(grads, x.node, g.iter().map(|&gv| gv * c).collect());
            }
        }
        Op::Offset(x) => {
            if x.node.is_some() {
                accumulate(grads, x.node, g.to_vec());
            }
        }
        Op::Sum(x) => {
            if x.node.is_some() {
                accumulate(grads, x.node, vec![g[0]; x.data.len()]);
            }
        }
        Op::Mean(x) => {
            if x.node.is_some() {
                let gv = g[0] / x.data.len() as f32;
                accumulate(grads, x.node, vec![gv; x.data.len()]);
            }
        }
        Op::L2NormRows { x, out } => {
            if x.node.is_some() {
                let n = x.shape[1];
                let mut gx = vec![0.0f32; x.data.len()];
                for (i, (&norm, &gv)) in out.iter().zip(g).enumerate() {
                    if norm > 0.0 {
                        let s = gv / norm;
                        for j in 0..n {
                            gx[i * n + j] = s * x.data[i * n + j];
                        }
                    }
                }
                accumulate(grads, x.node, gx);
            }
        }
        Op::DotRows(a, b) => {
            let n = a.shape[1];
            for (src, other) in [(a, b), (b, a)] {
                if src.node.is_some() {
                    let mut gx = vec![0.0f32; src.data.len()];
                    for (i, &gv) in g.iter().enumerate() {
                        for j in 0..n {
                            gx[i * n + j] = gv * other.data[i * n + j];
                        }
                    }
                    accumulate(grads, src.node, gx);
                }
            }
        }
        Op::BroadcastRows { x, reps } => {
            if x.node.is_some() {
                let n = x.data.len();
                let mut gx = vec![0.0f32; n];
                for r in 0..*reps {
                    for j in 0..n {
                        gx[j] += g[r * n + j];
                    }
                }
                accumulate(grads, x.node, gx);
            }
        }
        Op::SelectRows { x, idx } => {
            if x.node.is_some() {
                let n = x.shape[1];
                let mut gx = vec![0.0f32; x.data.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        gx[i * n + j] += g[r * n + j];
                    }
                }
                accumulate(grads, x.node, gx);
            }
        }
    }
}

/// Backward for broadcasting elementwise ops. `da`/`db` give the local
/// derivative of the output w.r.t. each operand at one output element, as a
/// function of both operand values there; broadcast operands receive the sum
/// over their expansion (in f64 for the scalar case).
fn ew_backward(
    a: &Src,
    b: &Src,
    g: &[f32],
    grads: &mut [Option<Vec<f32>>],
    da: impl Fn(f32, f32) -> f32,
    db: impl Fn(f32, f32) -> f32,
) {
    let pair = pairing("elementwise", &a.shape, &b.shape);
    let a_len = a.data.len();
    let b_len = b.data.len();
    let a_at = |t: usize| match expansion(pair, true) {
        Expand::Scalar => a.data[0],
        Expand::Row => a.data[t % a_len],
        Expand::Full => a.data[t],
    };
    let b_at = |t: usize| match expansion(pair, false) {
        Expand::Scalar => b.data[0],
        Expand::Row => b.data[t % b_len],
        Expand::Full => b.data[t],
    };
    if a.node.is_some() {
        let gx = reduce_grad(expansion(pair, true), a_len, g.len(), |t| {
            g[t] * da(a_at(t), b_at(t))
        });
        accumulate(grads, a.node, gx);
    }
    if b.node.is_some() {
        let gx = reduce_grad(expansion(pair, false), b_len, g.len(), |t| {
            g[t] * db(a_at(t), b_at(t))
        });
        accumulate(grads, b.node, gx);
    }
}

fn reduce_grad(exp: Expand, len: usize, n_out: usize, local: impl Fn(usize) -> f32) -> Vec<f32> {
    match exp {
        Expand::Full => (0..n_out).map(local).collect(),
        Expand::Scalar => {
            let acc: f64 = (0..n_out).map(|t| local(t) as f64).sum();
            vec![acc as f32]
        }
        Expand::Row => {
            let mut gx = vec![0.0f32; len];
            for t in 0..n_out {
                gx[t % len] += local(t);
            }
            gx
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], node: Option<usize>, gx: Vec<f32>) {
    let Some(id) = node else { return };
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(gx) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(gx),
    }
}

fn ew_forward(
    pair: Pairing,
    a: &[f32],
    a_shape: &[usize],
    b: &[f32],
    b_shape: &[usize],
    f: impl Fn(f32, f32) -> f32,
) -> (Vec<f32>, Vec<usize>) {
    match pair {
        Pairing::Same => (a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(), a_shape.to_vec()),
        Pairing::LeftScalar => (b.iter().map(|&y| f(a[0], y)).collect(), b_shape.to_vec()),
        Pairing::RightScalar => (a.iter().map(|&x| f(x, b[0])).collect(), a_shape.to_vec()),
        Pairing::LeftRow => {
            let n = a.len();
            (b.iter().enumerate().map(|(t, &y)| f(a[t % n], y)).collect(), b_shape.to_vec())
        }
        Pairing::RightRow => {
            let n = b.len();
            (a.iter().enumerate().map(|(t, &x)| f(x, b[t % n])).collect(), a_shape.to_vec())
        }
    }
}
