//! Reverse-mode automatic differentiation on a per-call tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and returns
//! the gradient of that scalar with respect to every node that requires one.
//! Tapes are single-use: build one per forward pass and drop it afterwards.

use std::cell::RefCell;
use std::ops::{Add, Mul, Neg, Sub};

use super::tensor::{matmul, matmul_at, matmul_bt, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Min(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    ConcatCols(usize, usize),
    SliceCols(usize, usize, usize),
    StraightThrough(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, or zeros when nothing flowed into it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.id];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn broadcast_dims(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast {a:?} with {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (ra, ca) = dims(a);
    let (rb, cb) = dims(b);
    let (r, c) = broadcast_dims((ra, ca), (rb, cb));
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let ia = if ra == 1 { 0 } else { i };
        let ib = if rb == 1 { 0 } else { i };
        for j in 0..c {
            let ja = if ca == 1 { 0 } else { j };
            let jb = if cb == 1 { 0 } else { j };
            out.push(f(ad[ia * ca + ja], bd[ib * cb + jb]));
        }
    }
    Tensor::matrix(r, c, out)
}

/// Sums a broadcast gradient back down to `target` dims.
fn reduce_to(grad: &Tensor, target: (usize, usize)) -> Tensor {
    let (r, c) = dims(grad);
    if (r, c) == target {
        return grad.clone();
    }
    let (tr, tc) = target;
    let mut out = vec![0.0; tr * tc];
    let g = grad.data();
    for i in 0..r {
        let oi = if tr == 1 { 0 } else { i };
        for j in 0..c {
            let oj = if tc == 1 { 0 } else { j };
            out[oi * tc + oj] += g[i * c + j];
        }
    }
    Tensor::matrix(tr, tc, out)
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that gradients are tracked for (parameters, attacked inputs).
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value_dims(&self, id: usize) -> (usize, usize) {
        dims(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn unary(&self, a: usize, op: Op, f: impl Fn(f64) -> f64) -> Var<'_> {
        let (value, ng) = {
            let nodes = self.nodes.borrow();
            (nodes[a].value.map(f), nodes[a].needs_grad)
        };
        self.push(value, op, ng)
    }

    fn binary(&self, a: usize, b: usize, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'_> {
        let (value, ng) = {
            let nodes = self.nodes.borrow();
            (
                zip_broadcast(&nodes[a].value, &nodes[b].value, f),
                nodes[a].needs_grad || nodes[b].needs_grad,
            )
        };
        self.push(value, op, ng)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let shapes: Vec<_> = nodes.iter().map(|n| dims(&n.value)).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let (lr, lc) = shapes[loss.id];
        grads[loss.id] = Some(Tensor::filled(lr, lc, 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let val = &node.value;
            match node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (r, k) = shapes[a];
                    let c = shapes[b].1;
                    if nodes[a].needs_grad {
                        let ga = matmul_bt(g.data(), nodes[b].value.data(), r, k, c);
                        accumulate(&mut grads[a], Tensor::matrix(r, k, ga));
                    }
                    if nodes[b].needs_grad {
                        let gb = matmul_at(nodes[a].value.data(), g.data(), r, k, c);
                        accumulate(&mut grads[b], Tensor::matrix(k, c, gb));
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    if nodes[a].needs_grad {
                        accumulate(&mut grads[a], reduce_to(&g, shapes[a]));
                    }
                    if nodes[b].needs_grad {
                        let mut gb = reduce_to(&g, shapes[b]);
                        if matches!(node.op, Op::Sub(..)) {
                            gb.data_mut().iter_mut().for_each(|v| *v = -*v);
                        }
                        accumulate(&mut grads[b], gb);
                    }
                }
                Op::Mul(a, b) => {
                    if nodes[a].needs_grad {
                        let full = zip_broadcast(&g, &nodes[b].value, |x, y| x * y);
                        accumulate(&mut grads[a], reduce_to(&full, shapes[a]));
                    }
                    if nodes[b].needs_grad {
                        let full = zip_broadcast(&g, &nodes[a].value, |x, y| x * y);
                        accumulate(&mut grads[b], reduce_to(&full, shapes[b]));
                    }
                }
                Op::Min(a, b) => {
                    // Ties route the gradient to the left operand.
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    let mask_a = zip_broadcast(av, bv, |x, y| if x <= y { 1.0 } else { 0.0 });
                    if nodes[a].needs_grad {
                        let full = zip_broadcast(&g, &mask_a, |x, m| x * m);
                        accumulate(&mut grads[a], reduce_to(&full, shapes[a]));
                    }
                    if nodes[b].needs_grad {
                        let full = zip_broadcast(&g, &mask_a, |x, m| x * (1.0 - m));
                        accumulate(&mut grads[b], reduce_to(&full, shapes[b]));
                    }
                }
                Op::Neg(a) => accumulate(&mut grads[a], g.map(|v| -v)),
                Op::Scale(a, s) => accumulate(&mut grads[a], g.map(|v| v * s)),
                Op::AddScalar(a) | Op::StraightThrough(a) => accumulate(&mut grads[a], g),
                Op::Relu(a) => {
                    let ga = zip_broadcast(&g, &nodes[a].value, |x, y| if y > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads[a], ga);
                }
                Op::Tanh(a) => {
                    let ga = zip_broadcast(&g, val, |x, t| x * (1.0 - t * t));
                    accumulate(&mut grads[a], ga);
                }
                Op::Exp(a) => {
                    let ga = zip_broadcast(&g, val, |x, e| x * e);
                    accumulate(&mut grads[a], ga);
                }
                Op::Log(a) => {
                    let ga = zip_broadcast(&g, &nodes[a].value, |x, y| x / y);
                    accumulate(&mut grads[a], ga);
                }
                Op::Square(a) => {
                    let ga = zip_broadcast(&g, &nodes[a].value, |x, y| 2.0 * x * y);
                    accumulate(&mut grads[a], ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = zip_broadcast(&g, &nodes[a].value, |x, y| {
                        if y < lo || y > hi {
                            0.0
                        } else {
                            x
                        }
                    });
                    accumulate(&mut grads[a], ga);
                }
                Op::Sum(a) | Op::Mean(a) => {
                    let (r, c) = shapes[a];
                    let scale = if matches!(node.op, Op::Mean(_)) {
                        1.0 / (r * c) as f64
                    } else {
                        1.0
                    };
                    accumulate(&mut grads[a], Tensor::filled(r, c, g.item() * scale));
                }
                Op::SumCols(a) => {
                    let (r, c) = shapes[a];
                    let mut out = Vec::with_capacity(r * c);
                    for i in 0..r {
                        out.extend(std::iter::repeat(g.data()[i]).take(c));
                    }
                    accumulate(&mut grads[a], Tensor::matrix(r, c, out));
                }
                Op::ConcatCols(a, b) => {
                    let (r, ca) = shapes[a];
                    let cb = shapes[b].1;
                    let c = ca + cb;
                    if nodes[a].needs_grad {
                        let mut out = Vec::with_capacity(r * ca);
                        for i in 0..r {
                            out.extend_from_slice(&g.data()[i * c..i * c + ca]);
                        }
                        accumulate(&mut grads[a], Tensor::matrix(r, ca, out));
                    }
                    if nodes[b].needs_grad {
                        let mut out = Vec::with_capacity(r * cb);
                        for i in 0..r {
                            out.extend_from_slice(&g.data()[i * c + ca..(i + 1) * c]);
                        }
                        accumulate(&mut grads[b], Tensor::matrix(r, cb, out));
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let (r, c) = shapes[a];
                    let w = end - start;
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        out[i * c + start..i * c + end]
                            .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    accumulate(&mut grads[a], Tensor::matrix(r, c, out));
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.tape.value_dims(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let tape = self.tape;
        let (value, ng) = {
            let nodes = tape.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[rhs.id];
            let (r, k) = dims(&a.value);
            let (k2, c) = dims(&b.value);
            assert_eq!(k, k2, "matmul inner dimensions {k} vs {k2}");
            (
                Tensor::matrix(r, c, matmul(a.value.data(), b.value.data(), r, k, c)),
                a.needs_grad || b.needs_grad,
            )
        };
        tape.push(value, Op::MatMul(self.id, rhs.id), ng)
    }

    pub fn min(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, rhs.id, Op::Min(self.id, rhs.id), |a, b| if a <= b { a } else { b })
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Scale(self.id, s), |v| v * s)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::AddScalar(self.id), |v| v + s)
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Tanh(self.id), f64::tanh)
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Log(self.id), f64::ln)
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Square(self.id), |v| v * v)
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Clamp(self.id, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn sum(self) -> Var<'t> {
        let (value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (Tensor::scalar(n.value.data().iter().sum()), n.needs_grad)
        };
        self.tape.push(value, Op::Sum(self.id), ng)
    }

    pub fn mean(self) -> Var<'t> {
        let (value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let len = n.value.len() as f64;
            (Tensor::scalar(n.value.data().iter().sum::<f64>() / len), n.needs_grad)
        };
        self.tape.push(value, Op::Mean(self.id), ng)
    }

    /// Row sums, `[r, c] -> [r, 1]`.
    pub fn sum_cols(self) -> Var<'t> {
        let (value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let (r, _) = dims(&n.value);
            let sums = (0..r).map(|i| n.value.row_slice(i).iter().sum()).collect();
            (Tensor::matrix(r, 1, sums), n.needs_grad)
        };
        self.tape.push(value, Op::SumCols(self.id), ng)
    }

    pub fn concat_cols(self, rhs: Var<'t>) -> Var<'t> {
        let (value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[rhs.id];
            let (r, ca) = dims(&a.value);
            let (rb, cb) = dims(&b.value);
            assert_eq!(r, rb, "concat_cols row mismatch");
            let mut out = Vec::with_capacity(r * (ca + cb));
            for i in 0..r {
                out.extend_from_slice(a.value.row_slice(i));
                out.extend_from_slice(b.value.row_slice(i));
            }
            (Tensor::matrix(r, ca + cb, out), a.needs_grad || b.needs_grad)
        };
        self.tape.push(value, Op::ConcatCols(self.id, rhs.id), ng)
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let (value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let (r, c) = dims(&a.value);
            assert!(start < end && end <= c, "slice_cols {start}..{end} of {c}");
            let mut out = Vec::with_capacity(r * (end - start));
            for i in 0..r {
                out.extend_from_slice(&a.value.row_slice(i)[start..end]);
            }
            (Tensor::matrix(r, end - start, out), a.needs_grad)
        };
        self.tape.push(value, Op::SliceCols(self.id, start, end), ng)
    }

    /// Replaces the forward value with `value` while passing gradients
    /// through unchanged (identity Jacobian).
    pub fn straight_through(self, value: Tensor) -> Var<'t> {
        assert_eq!(self.dims(), dims(&value), "straight_through shape");
        let ng = self.requires_grad();
        self.tape.push(value, Op::StraightThrough(self.id), ng)
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant(self.value())
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, rhs.id, Op::Add(self.id, rhs.id), |a, b| a + b)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, rhs.id, Op::Sub(self.id, rhs.id), |a, b| a - b)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, rhs.id, Op::Mul(self.id, rhs.id), |a, b| a * b)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Neg(self.id), |v| -v)
    }
}
