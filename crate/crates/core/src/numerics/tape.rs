//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles in
//! execution order, so the node list is topologically sorted by
//! construction. [`Tape::backward`] walks it once in reverse.
//!
//! Shape errors while building a graph are programming errors and panic;
//! the public model operations validate their inputs before touching a
//! tape.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::{Add, Mul, Neg, Sub};

use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug)]
enum Op<R> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, R),
    AddScalar(usize),
    MatMul(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize, R),
    Square(usize),
    Sum(usize),
    SumCols(usize),
    LogSoftmaxRows(usize),
    SoftmaxRows(usize),
    Gather(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    Reshape(usize),
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
    is_param: bool,
}

/// Ordered record of primitive operations.
pub struct Tape<R: Real> {
    nodes: RefCell<Vec<Node<R>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, R: Real> {
    tape: &'t Tape<R>,
    id: usize,
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Debug, Default)]
pub struct Gradients<R> {
    by_id: HashMap<usize, Tensor<R>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, var: usize) -> Option<&Tensor<R>> {
        self.by_id.get(&var)
    }

    /// Takes the gradient of a parameter out of the map.
    pub fn take(&mut self, var: usize) -> Option<Tensor<R>> {
        self.by_id.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    /// Registers a trainable leaf.
    pub fn param(&self, value: Tensor<R>) -> Var<'_, R> {
        self.push_leaf(value, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<R>) -> Var<'_, R> {
        self.push_leaf(value, false)
    }

    pub fn scalar(&self, x: R) -> Var<'_, R> {
        self.constant(Tensor::scalar(x))
    }

    /// Leaf whose gradient flag follows the tensor's own `requires_grad`.
    pub fn leaf(&self, value: Tensor<R>) -> Var<'_, R> {
        let flag = value.requires_grad();
        self.push_leaf(value, flag)
    }

    fn push_leaf(&self, value: Tensor<R>, trainable: bool) -> Var<'_, R> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: trainable,
            is_param: trainable,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor<R>, op: Op<R>, inputs: &[usize]) -> Var<'_, R> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = inputs.iter().any(|&i| nodes[i].needs_grad);
        nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param: false,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse sweep from a scalar `loss`. Returns `∂loss/∂p` for every
    /// trainable leaf reachable from the loss and clears the tape.
    pub fn backward(&self, loss: Var<'_, R>) -> Result<Gradients<R>> {
        let result = self.backward_inner(loss.id);
        self.clear();
        result
    }

    fn backward_inner(&self, loss: usize) -> Result<Gradients<R>> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss].value;
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..=loss).map(|_| None).collect();
        grads[loss] = Some(Tensor::new(loss_value.shape().to_vec(), vec![R::one()])?);

        for id in (0..=loss).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if node.is_param {
                grads[id] = Some(g);
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if nodes[id].is_param {
                    if !g.is_finite() {
                        return Err(Error::NonFinite(format!("gradient of parameter node {id}")));
                    }
                    out.by_id.insert(id, g);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<R: Real>(slot: &mut Option<Tensor<R>>, delta: Tensor<R>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(delta),
    }
}

/// Gradient slot of node `i`, zero-initialized on first touch. Sparse
/// writers (row gathers, column slices) add into it in place.
fn slot_mut<'a, R: Real>(grads: &'a mut [Option<Tensor<R>>], i: usize, like: &Tensor<R>) -> &'a mut Tensor<R> {
    grads[i].get_or_insert_with(|| Tensor::zeros_like(like))
}

fn propagate<R: Real>(nodes: &[Node<R>], id: usize, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) {
    let node = &nodes[id];
    let y = &node.value;
    let wants = |i: usize| nodes[i].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if wants(*a) {
                accumulate(&mut grads[*a], g.clone());
            }
            if wants(*b) {
                accumulate(&mut grads[*b], g.clone());
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                accumulate(&mut grads[*a], g.clone());
            }
            if wants(*b) {
                accumulate(&mut grads[*b], g.map(|x| -x));
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if wants(*a) {
                accumulate(&mut grads[*a], g.zip_map(vb, |x, y| x * y));
            }
            if wants(*b) {
                accumulate(&mut grads[*b], g.zip_map(va, |x, y| x * y));
            }
        }
        Op::AddRow(a, row) => {
            if wants(*a) {
                accumulate(&mut grads[*a], g.clone());
            }
            if wants(*row) {
                let cols = g.cols();
                let mut acc = vec![R::zero(); cols];
                for r in 0..g.rows() {
                    for (s, &v) in acc.iter_mut().zip(g.row_slice(r)) {
                        *s += v;
                    }
                }
                let shape = nodes[*row].value.shape().to_vec();
                accumulate(&mut grads[*row], Tensor::new(shape, acc).unwrap());
            }
        }
        Op::MulCol(a, col) => {
            let (va, vc) = (&nodes[*a].value, &nodes[*col].value);
            let cols = g.cols();
            if wants(*a) {
                let mut d = g.clone();
                for r in 0..g.rows() {
                    let c = vc.data()[r];
                    for v in d.row_slice_mut(r) {
                        *v *= c;
                    }
                }
                accumulate(&mut grads[*a], d);
            }
            if wants(*col) {
                let mut d = vec![R::zero(); g.rows()];
                for (r, slot) in d.iter_mut().enumerate() {
                    let ga = &g.data()[r * cols..(r + 1) * cols];
                    let xa = &va.data()[r * cols..(r + 1) * cols];
                    *slot = ga.iter().zip(xa).map(|(&p, &q)| p * q).sum();
                }
                let shape = vc.shape().to_vec();
                accumulate(&mut grads[*col], Tensor::new(shape, d).unwrap());
            }
        }
        Op::Scale(a, c) => {
            if wants(*a) {
                let c = *c;
                accumulate(&mut grads[*a], g.map(|x| x * c));
            }
        }
        Op::AddScalar(a) => {
            if wants(*a) {
                accumulate(&mut grads[*a], g.clone());
            }
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (va.rows(), va.cols(), vb.cols());
            if wants(*a) {
                // dA = G · Bᵀ
                let mut d = vec![R::zero(); m * k];
                for i in 0..m {
                    let grow = &g.data()[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &vb.data()[p * n..(p + 1) * n];
                        d[i * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                    }
                }
                accumulate(&mut grads[*a], Tensor::new(va.shape().to_vec(), d).unwrap());
            }
            if wants(*b) {
                // dB = Aᵀ · G
                let at = va.transpose();
                let mut d = vec![R::zero(); k * n];
                matmul_into(at.data(), g.data(), &mut d, k, m, n);
                accumulate(&mut grads[*b], Tensor::new(vb.shape().to_vec(), d).unwrap());
            }
        }
        Op::Tanh(a) => {
            if wants(*a) {
                accumulate(&mut grads[*a], g.zip_map(y, |gv, yv| gv * (R::one() - yv * yv)));
            }
        }
        Op::Sigmoid(a) => {
            if wants(*a) {
                accumulate(&mut grads[*a], g.zip_map(y, |gv, yv| gv * yv * (R::one() - yv)));
            }
        }
        Op::Relu(a) => {
            if wants(*a) {
                accumulate(
                    &mut grads[*a],
                    g.zip_map(y, |gv, yv| if yv > R::zero() { gv } else { R::zero() }),
                );
            }
        }
        Op::Exp(a) => {
            if wants(*a) {
                accumulate(&mut grads[*a], g.zip_map(y, |gv, yv| gv * yv));
            }
        }
        Op::Ln(a, floor) => {
            if wants(*a) {
                let x = &nodes[*a].value;
                let floor = *floor;
                accumulate(
                    &mut grads[*a],
                    g.zip_map(x, |gv, xv| if xv > floor { gv / xv } else { R::zero() }),
                );
            }
        }
        Op::Square(a) => {
            if wants(*a) {
                let x = &nodes[*a].value;
                let two = R::lit(2.0);
                accumulate(&mut grads[*a], g.zip_map(x, |gv, xv| two * gv * xv));
            }
        }
        Op::Sum(a) => {
            if wants(*a) {
                let gv = g.data()[0];
                let shape = nodes[*a].value.shape().to_vec();
                let n = nodes[*a].value.len();
                accumulate(&mut grads[*a], Tensor::new(shape, vec![gv; n]).unwrap());
            }
        }
        Op::SumCols(a) => {
            if wants(*a) {
                let x = &nodes[*a].value;
                let cols = x.cols();
                let mut d = Vec::with_capacity(x.len());
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv, cols));
                }
                accumulate(&mut grads[*a], Tensor::new(x.shape().to_vec(), d).unwrap());
            }
        }
        Op::LogSoftmaxRows(a) => {
            if wants(*a) {
                let mut d = g.clone();
                for r in 0..g.rows() {
                    let total: R = g.row_slice(r).iter().copied().sum();
                    let yrow = y.row_slice(r);
                    for (dv, &yv) in d.row_slice_mut(r).iter_mut().zip(yrow) {
                        *dv -= yv.exp() * total;
                    }
                }
                accumulate(&mut grads[*a], d);
            }
        }
        Op::SoftmaxRows(a) => {
            if wants(*a) {
                let mut d = g.clone();
                for r in 0..g.rows() {
                    let yrow = y.row_slice(r);
                    let dot: R = g.row_slice(r).iter().zip(yrow).map(|(&p, &q)| p * q).sum();
                    for (dv, &yv) in d.row_slice_mut(r).iter_mut().zip(yrow) {
                        *dv = yv * (*dv - dot);
                    }
                }
                accumulate(&mut grads[*a], d);
            }
        }
        Op::Gather(a, idx) => {
            if wants(*a) {
                let d = slot_mut(grads, *a, &nodes[*a].value);
                for (r, &src) in idx.iter().enumerate() {
                    let grow = g.row_slice(r);
                    for (dv, &gv) in d.row_slice_mut(src).iter_mut().zip(grow) {
                        *dv += gv;
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                if wants(p) {
                    let shape = nodes[p].value.shape().to_vec();
                    let slice = g.data()[offset..offset + n].to_vec();
                    accumulate(&mut grads[p], Tensor::new(shape, slice).unwrap());
                }
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let rows = g.rows();
            let total_cols = g.cols();
            let mut offset = 0;
            for &p in parts {
                let pc = nodes[p].value.cols();
                if wants(p) {
                    let mut d = Vec::with_capacity(rows * pc);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total_cols + offset..r * total_cols + offset + pc]);
                    }
                    let shape = nodes[p].value.shape().to_vec();
                    accumulate(&mut grads[p], Tensor::new(shape, d).unwrap());
                }
                offset += pc;
            }
        }
        Op::SliceCols(a, start) => {
            if wants(*a) {
                let d = slot_mut(grads, *a, &nodes[*a].value);
                let width = g.cols();
                for r in 0..g.rows() {
                    for (dv, &gv) in d.row_slice_mut(r)[*start..*start + width].iter_mut().zip(g.row_slice(r)) {
                        *dv += gv;
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if wants(*a) {
                let shape = nodes[*a].value.shape().to_vec();
                accumulate(&mut grads[*a], Tensor::new(shape, g.data().to_vec()).unwrap());
            }
        }
    }
}

impl<'t, R: Real> Var<'t, R> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<R> {
        self.tape
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor<R> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Runs `f` against the forward value without copying it.
    pub fn with_value<T>(&self, f: impl FnOnce(&Tensor<R>) -> T) -> T {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn rows(&self) -> usize {
        self.with_value(|v| v.rows())
    }

    pub fn cols(&self) -> usize {
        self.with_value(|v| v.cols())
    }

    /// Value of a one-element node.
    pub fn item(&self) -> R {
        self.with_value(|v| v.item().expect("item() on a non-scalar node"))
    }

    fn unary(self, op: Op<R>, f: impl FnOnce(&Tensor<R>) -> Tensor<R>) -> Self {
        let value = self.with_value(f);
        self.tape.push(value, op, &[self.id])
    }

    fn binary_same(self, other: Self, name: &'static str, op: Op<R>, f: impl Fn(R, R) -> R) -> Self {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            a.same_shape(b, name).unwrap_or_else(|e| panic!("{e}"));
            a.zip_map(b, f)
        };
        self.tape.push(value, op, &[self.id, other.id])
    }

    pub fn add_row(self, row: Self) -> Self {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[row.id].value);
            assert_eq!(b.len(), a.cols(), "add_row: row length must equal column count");
            let mut out = a.clone().with_requires_grad(false);
            for r in 0..a.rows() {
                for (o, &bv) in out.row_slice_mut(r).iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            out
        };
        self.tape.push(value, Op::AddRow(self.id, row.id), &[self.id, row.id])
    }

    /// Scales each row of `self` by the matching entry of an `r × 1` column.
    pub fn mul_col(self, col: Self) -> Self {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, c) = (&nodes[self.id].value, &nodes[col.id].value);
            assert_eq!(c.len(), a.rows(), "mul_col: column length must equal row count");
            let mut out = a.clone().with_requires_grad(false);
            for r in 0..a.rows() {
                let cv = c.data()[r];
                for o in out.row_slice_mut(r) {
                    *o *= cv;
                }
            }
            out
        };
        self.tape.push(value, Op::MulCol(self.id, col.id), &[self.id, col.id])
    }

    pub fn scale(self, c: R) -> Self {
        self.unary(Op::Scale(self.id, c), |v| v.map(|x| x * c))
    }

    pub fn add_scalar(self, c: R) -> Self {
        self.unary(Op::AddScalar(self.id), |v| v.map(|x| x + c))
    }

    /// `1 - self`, elementwise.
    pub fn one_minus(self) -> Self {
        self.scale(-R::one()).add_scalar(R::one())
    }

    pub fn matmul(self, other: Self) -> Self {
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id]
                .value
                .matmul(&nodes[other.id].value)
                .unwrap_or_else(|e| panic!("{e}"))
        };
        self.tape.push(value, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    pub fn tanh(self) -> Self {
        self.unary(Op::Tanh(self.id), |v| v.map(|x| x.tanh()))
    }

    pub fn sigmoid(self) -> Self {
        self.unary(Op::Sigmoid(self.id), |v| v.map(sigmoid))
    }

    pub fn relu(self) -> Self {
        self.unary(Op::Relu(self.id), |v| v.map(|x| x.max(R::zero())))
    }

    pub fn exp(self) -> Self {
        self.unary(Op::Exp(self.id), |v| v.map(|x| x.exp()))
    }

    /// Natural log of `max(x, floor)`; zero gradient where the floor binds.
    pub fn ln_floor(self, floor: R) -> Self {
        self.unary(Op::Ln(self.id, floor), |v| v.map(|x| x.max(floor).ln()))
    }

    pub fn square(self) -> Self {
        self.unary(Op::Square(self.id), |v| v.map(|x| x * x))
    }

    pub fn sum(self) -> Self {
        self.unary(Op::Sum(self.id), |v| Tensor::scalar(v.sum()))
    }

    /// Row sums: `r × c → r × 1`.
    pub fn sum_cols(self) -> Self {
        self.unary(Op::SumCols(self.id), |v| {
            Tensor::column((0..v.rows()).map(|r| v.row_slice(r).iter().copied().sum()).collect())
        })
    }

    pub fn log_softmax_rows(self) -> Self {
        self.unary(Op::LogSoftmaxRows(self.id), |v| {
            let mut out = v.clone().with_requires_grad(false);
            for r in 0..v.rows() {
                let ls = super::tensor::log_softmax(v.row_slice(r));
                out.row_slice_mut(r).copy_from_slice(&ls);
            }
            out
        })
    }

    pub fn softmax_rows(self) -> Self {
        self.unary(Op::SoftmaxRows(self.id), |v| {
            let mut out = v.clone().with_requires_grad(false);
            for r in 0..v.rows() {
                let p = super::tensor::softmax(v.row_slice(r));
                out.row_slice_mut(r).copy_from_slice(&p);
            }
            out
        })
    }

    /// Row `i` of the output is row `idx[i]` of `self`.
    pub fn gather_rows(self, idx: &[usize]) -> Self {
        let value = self.with_value(|v| {
            let cols = v.cols();
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &i in idx {
                data.extend_from_slice(v.row_slice(i));
            }
            Tensor::matrix(idx.len(), cols, data).unwrap()
        });
        self.tape.push(value, Op::Gather(self.id, idx.to_vec()), &[self.id])
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Self {
        let value = self.with_value(|v| {
            assert!(start + len <= v.cols(), "slice_cols out of range");
            let mut data = Vec::with_capacity(v.rows() * len);
            for r in 0..v.rows() {
                data.extend_from_slice(&v.row_slice(r)[start..start + len]);
            }
            Tensor::matrix(v.rows(), len, data).unwrap()
        });
        self.tape.push(value, Op::SliceCols(self.id, start), &[self.id])
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Self {
        self.unary(Op::Reshape(self.id), |v| {
            Tensor::matrix(rows, cols, v.data().to_vec()).unwrap_or_else(|e| panic!("{e}"))
        })
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(parts: &[Self]) -> Self {
        let tape = parts[0].tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let cols = nodes[parts[0].id].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &nodes[p.id].value;
                assert_eq!(v.cols(), cols, "concat_rows: column mismatch");
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Tensor::matrix(rows, cols, data).unwrap()
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push(value, Op::ConcatRows(ids.clone()), &ids)
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Self]) -> Self {
        let tape = parts[0].tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let rows = nodes[parts[0].id].value.rows();
            let total: usize = parts.iter().map(|p| nodes[p.id].value.cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    let v = &nodes[p.id].value;
                    assert_eq!(v.rows(), rows, "concat_cols: row mismatch");
                    data.extend_from_slice(v.row_slice(r));
                }
            }
            Tensor::matrix(rows, total, data).unwrap()
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push(value, Op::ConcatCols(ids.clone()), &ids)
    }
}

#[inline]
pub(crate) fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

impl<'t, R: Real> Add for Var<'t, R> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.binary_same(rhs, "add", Op::Add(self.id, rhs.id), |a, b| a + b)
    }
}

impl<'t, R: Real> Sub for Var<'t, R> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.binary_same(rhs, "sub", Op::Sub(self.id, rhs.id), |a, b| a - b)
    }
}

impl<'t, R: Real> Mul for Var<'t, R> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.binary_same(rhs, "mul", Op::Mul(self.id, rhs.id), |a, b| a * b)
    }
}

impl<'t, R: Real> Neg for Var<'t, R> {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-R::one())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Var<'t, f64>, x: Tensor<f64>) {
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let loss = build(&tape, v);
        let mut grads = tape.backward(loss).unwrap();
        let g = grads.take(v.id()).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let tape = Tape::new();
                let v = tape.param(xp);
                build(&tape, v).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (fd - g.data()[i]).abs() / fd.abs().max(g.data()[i].abs()).max(1e-3);
            assert!(err < 1e-6, "coord {i}: fd {fd} vs ad {}", g.data()[i]);
        }
    }

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.param(Tensor::scalar(3.0));
        let loss = x * y;
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x.id()).unwrap().data(), &[3.0]);
        assert_eq!(grads.get(y.id()).unwrap().data(), &[2.0]);
        assert!(tape.is_empty());
    }

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let v = tape.param(Tensor::row(vec![0.3, -1.0, 2.0, 5.0, 0.0]));
        let grads = tape.backward(v.sum()).unwrap();
        assert_eq!(grads.get(v.id()).unwrap().data(), &[1.0; 5]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let v = tape.param(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(v.tanh()), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn nan_loss_rejected() {
        let tape = Tape::new();
        let v = tape.param(Tensor::scalar(-1.0));
        let loss = v.exp().scale(f64::NAN);
        assert!(matches!(tape.backward(loss), Err(Error::NonFinite(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(4.0));
        let p = tape.param(Tensor::scalar(1.5));
        let grads = tape.backward(c * p).unwrap();
        assert!(grads.get(c.id()).is_none());
        assert_eq!(grads.get(p.id()).unwrap().data(), &[4.0]);
    }

    #[test]
    fn elementwise_chain_matches_fd() {
        let x = Tensor::matrix(2, 3, vec![0.1, -0.4, 0.9, 1.3, -0.2, 0.05]).unwrap();
        fd_check(
            |_, v| (v.tanh() * v.sigmoid() + v.exp().ln_floor(1e-8) - v.square()).sum(),
            x,
        );
    }

    #[test]
    fn matmul_and_broadcast_match_fd() {
        let x = Tensor::matrix(3, 2, vec![0.1, -0.4, 0.9, 1.3, -0.2, 0.05]).unwrap();
        fd_check(
            |tape, v| {
                let w = tape.constant(Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.3]).unwrap());
                let b = tape.constant(Tensor::row(vec![0.2, -0.1]));
                let col = v.slice_cols(0, 1).tanh();
                v.matmul(w).add_row(b).tanh().mul_col(col).square().sum()
            },
            x.clone(),
        );
        fd_check(
            |tape, v| {
                let a = tape.constant(Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.3, 0.1, 0.7]).unwrap());
                a.matmul(v).tanh().sum()
            },
            x,
        );
    }

    #[test]
    fn softmax_family_matches_fd() {
        let x = Tensor::matrix(2, 3, vec![0.1, -0.4, 0.9, 1.3, -0.2, 0.05]).unwrap();
        fd_check(
            |tape, v| {
                let w = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, -1.0, 0.5, 0.1, 3.0]).unwrap());
                (v.log_softmax_rows() * w).sum() + (v.softmax_rows() * w).square().sum()
            },
            x,
        );
    }

    #[test]
    fn structural_ops_match_fd() {
        let x = Tensor::matrix(3, 2, vec![0.1, -0.4, 0.9, 1.3, -0.2, 0.05]).unwrap();
        fd_check(
            |_, v| {
                let g = v.gather_rows(&[2, 0, 2, 1]);
                let stacked = Var::concat_rows(&[g, v]);
                let wide = Var::concat_cols(&[stacked, stacked.tanh()]);
                let r = wide.reshape(2, 14);
                r.sum_cols().square().sum() + wide.slice_cols(1, 2).exp().sum()
            },
            x,
        );
    }
}
