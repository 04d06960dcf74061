//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to a [`Tape`]; node ids grow
//! monotonically, so the tape order is already a topological order and
//! the backward sweep is a single reverse scan.

use std::cell::{Ref, RefCell};
use std::fmt;

use super::kernels::{self, axis_layout, ConvGeom};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    AddConst(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    MatMul(usize, usize),
    Transpose(usize),
    AddBias(usize, usize),
    ScaleRows(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
    },
    Sum(usize, usize),
    Mean(usize, usize),
    Max {
        x: usize,
        argmax: Vec<usize>,
    },
    SumAll(usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    L2Normalize {
        x: usize,
        axis: usize,
        eps: S,
    },
    Reshape(usize),
    Take {
        x: usize,
        axis: usize,
        index: usize,
    },
    Stack(Vec<usize>),
    SliceLast {
        x: usize,
        start: usize,
    },
    Gather {
        x: usize,
        indices: Vec<usize>,
    },
    PairwiseDist(usize),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records operations for one forward pass.
pub struct Tape<S> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, false)
    }

    pub(crate) fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor<S>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Gradients of the single-element `root` with respect to every node
    /// that requires them.
    pub fn backward(&self, root: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: root_node.value.shape().to_vec(),
                reason: "root must hold exactly one element".into(),
            });
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(root.id + 1);
        grads.resize_with(root.id + 1, || None);
        if root_node.requires_grad {
            grads[root.id] = Some(vec![S::one()]);
        }
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes[..=root.id]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// `None` when no gradient reached the variable.
    pub fn get(&self, var: Var<'_, S>) -> Option<Tensor<S>> {
        self.get_id(var.id)
    }

    pub(crate) fn get_id(&self, id: usize) -> Option<Tensor<S>> {
        let g = self.grads.get(id)?.as_ref()?;
        Some(Tensor::from_parts(self.shapes[id].clone(), g.clone()))
    }

    /// Gradient data, or zeros of the variable's shape when none reached it.
    pub fn get_or_zeros(&self, var: Var<'_, S>) -> Tensor<S> {
        self.get(var).unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, S> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S> Clone for Var<'_, S> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<S> Copy for Var<'_, S> {}

impl<S: Scalar> fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn acc<'a, S: Scalar>(
    grads: &'a mut [Option<Vec<S>>],
    nodes: &[Node<S>],
    id: usize,
) -> Option<&'a mut Vec<S>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![S::zero(); len]))
}

fn backprop_node<S: Scalar>(nodes: &[Node<S>], node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += *c * y);
            }
        }
        Op::AddConst(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
        }
        Op::Relu(a) => {
            let av = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    if av[i] > S::zero() {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i] * (S::one() - out[i]);
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * (S::one() - out[i] * out[i]);
                }
            }
        }
        Op::MatMul(a, b) => {
            let (at, bt) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
            if let Some(ga) = acc(grads, nodes, *a) {
                kernels::matmul_nt_acc(g, bt.data(), ga, m, k, n);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                kernels::matmul_tn_acc(at.data(), g, gb, m, k, n);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
            if let Some(ga) = acc(grads, nodes, *a) {
                // out is r×c, input is c×r
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::AddBias(x, b) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(v, &y)| *v += y);
            }
            let d = nodes[*b].value.len();
            if let Some(gb) = acc(grads, nodes, *b) {
                for row in g.chunks_exact(d) {
                    gb.iter_mut().zip(row).for_each(|(v, &y)| *v += y);
                }
            }
        }
        Op::ScaleRows(x, w) => {
            let (xv, wv) = (nodes[*x].value.data(), nodes[*w].value.data());
            let d = xv.len() / wv.len();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, &s) in wv.iter().enumerate() {
                    for j in r * d..(r + 1) * d {
                        gx[j] += g[j] * s;
                    }
                }
            }
            if let Some(gw) = acc(grads, nodes, *w) {
                for (r, gwv) in gw.iter_mut().enumerate() {
                    let mut s = S::zero();
                    for j in r * d..(r + 1) * d {
                        s += g[j] * xv[j];
                    }
                    *gwv += s;
                }
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let (xv, wv) = (nodes[*x].value.data(), nodes[*w].value.data());
            // Split borrows: the three ids are distinct nodes.
            let mut gx = acc(grads, nodes, *x).map(std::mem::take);
            let mut gw = acc(grads, nodes, *w).map(std::mem::take);
            let mut gb = acc(grads, nodes, *b).map(std::mem::take);
            kernels::conv2d_backward(
                geom,
                xv,
                wv,
                g,
                gx.as_deref_mut(),
                gw.as_deref_mut(),
                gb.as_deref_mut(),
            );
            for (id, v) in [(*x, gx), (*w, gw), (*b, gb)] {
                if let Some(v) = v {
                    grads[id] = Some(v);
                }
            }
        }
        Op::Sum(x, axis) | Op::Mean(x, axis) => {
            let (outer, len, inner) = axis_layout(nodes[*x].value.shape(), *axis);
            let scale = match node.op {
                Op::Mean(..) => S::one() / S::lit(len as f64),
                _ => S::one(),
            };
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            gx[(o * len + l) * inner + i] += scale * g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::Max { x, argmax, .. } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for (k, &src) in argmax.iter().enumerate() {
                    gx[src] += g[k];
                }
            }
        }
        Op::SumAll(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::Softmax(x, axis) => {
            let (outer, len, inner) = axis_layout(node.value.shape(), *axis);
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: S = (0..len).map(|l| g[idx(l)] * out[idx(l)]).sum();
                        for l in 0..len {
                            gx[idx(l)] += out[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax(x, axis) => {
            let (outer, len, inner) = axis_layout(node.value.shape(), *axis);
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let gsum: S = (0..len).map(|l| g[idx(l)]).sum();
                        for l in 0..len {
                            gx[idx(l)] += g[idx(l)] - out[idx(l)].exp() * gsum;
                        }
                    }
                }
            }
        }
        Op::L2Normalize { x, axis, eps } => {
            let xv = nodes[*x].value.data();
            let (outer, len, inner) = axis_layout(node.value.shape(), *axis);
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let norm = (0..len).map(|l| xv[idx(l)] * xv[idx(l)]).sum::<S>().sqrt();
                        if norm >= *eps {
                            let dot: S = (0..len).map(|l| g[idx(l)] * out[idx(l)]).sum();
                            for l in 0..len {
                                gx[idx(l)] += (g[idx(l)] - out[idx(l)] * dot) / norm;
                            }
                        } else {
                            for l in 0..len {
                                gx[idx(l)] += g[idx(l)] / *eps;
                            }
                        }
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(v, &y)| *v += y);
            }
        }
        Op::Take { x, axis, index } => {
            let (outer, len, inner) = axis_layout(nodes[*x].value.shape(), *axis);
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        gx[(o * len + index) * inner + i] += g[o * inner + i];
                    }
                }
            }
        }
        Op::Stack(ids) => {
            let chunk = g.len() / ids.len();
            for (k, &id) in ids.iter().enumerate() {
                if let Some(gx) = acc(grads, nodes, id) {
                    gx.iter_mut()
                        .zip(&g[k * chunk..(k + 1) * chunk])
                        .for_each(|(v, &y)| *v += y);
                }
            }
        }
        Op::SliceLast { x, start } => {
            let src_last = *nodes[*x].value.shape().last().unwrap();
            let dst_last = *node.value.shape().last().unwrap();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, grow) in g.chunks_exact(dst_last).enumerate() {
                    let base = r * src_last + start;
                    for (j, &y) in grow.iter().enumerate() {
                        gx[base + j] += y;
                    }
                }
            }
        }
        Op::Gather { x, indices } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for (k, &src) in indices.iter().enumerate() {
                    gx[src] += g[k];
                }
            }
        }
        Op::PairwiseDist(x) => {
            let xt = &nodes[*x].value;
            let (n, d) = (xt.shape()[0], xt.shape()[1]);
            let xv = xt.data();
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..n {
                    for j in 0..n {
                        let dist = out[i * n + j];
                        if i == j || dist <= S::zero() {
                            continue;
                        }
                        let coef = g[i * n + j] / dist;
                        for k in 0..d {
                            let diff = xv[i * d + k] - xv[j * d + k];
                            gx[i * d + k] += coef * diff;
                            gx[j * d + k] -= coef * diff;
                        }
                    }
                }
            }
        }
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.id).shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.value_of(self.id).len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn value(&self) -> Tensor<S> {
        self.tape.value_of(self.id).clone()
    }

    pub fn item(&self) -> S {
        self.tape.value_of(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copies the value into a fresh constant leaf with no backward edges.
    pub fn detach(self) -> Var<'t, S> {
        self.tape.constant(self.value())
    }

    fn unary(self, op: Op<S>, f: impl Fn(S) -> S) -> Var<'t, S> {
        let value = {
            let x = self.tape.value_of(self.id);
            Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
        };
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t, S>, name: &'static str, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var<'t, S>> {
        let value = {
            let (a, b) = (self.tape.value_of(self.id), self.tape.value_of(other.id));
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    op: name,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            Tensor::from_parts(
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            )
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, op, rg))
    }

    pub fn add(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, c: S) -> Var<'t, S> {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn add_scalar(self, c: S) -> Var<'t, S> {
        self.unary(Op::AddConst(self.id), |v| v + c)
    }

    pub fn relu(self) -> Var<'t, S> {
        self.unary(Op::Relu(self.id), |v| if v > S::zero() { v } else { S::zero() })
    }

    pub fn sigmoid(self) -> Var<'t, S> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(self) -> Var<'t, S> {
        self.unary(Op::Tanh(self.id), |v| v.tanh())
    }

    pub fn matmul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let value = {
            let (a, b) = (self.tape.value_of(self.id), self.tape.value_of(other.id));
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![S::zero(); m * n];
            kernels::matmul_acc(a.data(), b.data(), &mut c, m, k, n);
            Tensor::from_parts(vec![m, n], c)
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    pub fn transpose(self) -> Result<Var<'t, S>> {
        let value = {
            let a = self.tape.value_of(self.id);
            if a.rank() != 2 {
                return Err(rank_error("transpose", a.shape(), 2));
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let mut out = vec![S::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a.data()[i * c + j];
                }
            }
            Tensor::from_parts(vec![c, r], out)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Transpose(self.id), rg))
    }

    /// Adds `bias` (length = last axis) to every row.
    pub fn add_bias(self, bias: Var<'t, S>) -> Result<Var<'t, S>> {
        let value = {
            let (x, b) = (self.tape.value_of(self.id), self.tape.value_of(bias.id));
            if b.rank() != 1 || x.shape().last() != Some(&b.len()) {
                return Err(Error::ShapeMismatch {
                    op: "add_bias",
                    lhs: x.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let d = b.len();
            let mut out = x.data().to_vec();
            for row in out.chunks_exact_mut(d) {
                row.iter_mut().zip(b.data()).for_each(|(v, &bv)| *v += bv);
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        };
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(value, Op::AddBias(self.id, bias.id), rg))
    }

    /// Multiplies each last-axis row by the matching entry of `weights`,
    /// whose shape equals this shape without its last axis.
    pub fn scale_rows(self, weights: Var<'t, S>) -> Result<Var<'t, S>> {
        let value = {
            let (x, w) = (self.tape.value_of(self.id), self.tape.value_of(weights.id));
            if x.rank() < 2 || x.shape()[..x.rank() - 1] != *w.shape() {
                return Err(Error::ShapeMismatch {
                    op: "scale_rows",
                    lhs: x.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                });
            }
            let d = *x.shape().last().unwrap();
            let mut out = x.data().to_vec();
            for (row, &s) in out.chunks_exact_mut(d).zip(w.data()) {
                row.iter_mut().for_each(|v| *v *= s);
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        };
        let rg = self.requires_grad() || weights.requires_grad();
        Ok(self.tape.push(value, Op::ScaleRows(self.id, weights.id), rg))
    }

    /// Direct 2-D convolution of `self` (`N×C×H×W`) with `weight`
    /// (`O×C×kh×kw`) plus `bias` (`O`).
    pub fn conv2d(self, weight: Var<'t, S>, bias: Var<'t, S>, stride: usize, pad: usize) -> Result<Var<'t, S>> {
        let (value, geom) = {
            let (x, w, b) = (
                self.tape.value_of(self.id),
                self.tape.value_of(weight.id),
                self.tape.value_of(bias.id),
            );
            if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: x.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                });
            }
            if b.shape() != [w.shape()[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: w.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            if stride == 0 {
                return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
            }
            let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
            let (Some(oh), Some(ow)) = (
                ConvGeom::out_extent(h, kh, stride, pad),
                ConvGeom::out_extent(wd, kw, stride, pad),
            ) else {
                return Err(Error::InvalidShape {
                    op: "conv2d",
                    shape: x.shape().to_vec(),
                    reason: format!("kernel {kh}x{kw} does not fit the input padded by {pad}"),
                });
            };
            let geom = ConvGeom {
                n,
                c,
                h,
                w: wd,
                o,
                kh,
                kw,
                stride,
                pad,
                oh,
                ow,
            };
            let mut out = vec![S::zero(); n * o * oh * ow];
            kernels::conv2d_forward(&geom, x.data(), w.data(), b.data(), &mut out);
            (Tensor::from_parts(vec![n, o, oh, ow], out), geom)
        };
        let rg = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            value,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
                geom,
            },
            rg,
        ))
    }

    fn reduce(self, name: &'static str, axis: usize, mean: bool) -> Result<Var<'t, S>> {
        let value = {
            let x = self.tape.value_of(self.id);
            check_axis(name, axis, x.rank())?;
            let (outer, len, inner) = axis_layout(x.shape(), axis);
            let mut out = vec![S::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += x.data()[(o * len + l) * inner + i];
                    }
                }
            }
            if mean {
                let s = S::one() / S::lit(len as f64);
                out.iter_mut().for_each(|v| *v *= s);
            }
            Tensor::from_parts(reduced_shape(x.shape(), axis), out)
        };
        let op = if mean { Op::Mean(self.id, axis) } else { Op::Sum(self.id, axis) };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, op, rg))
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, S>> {
        self.reduce("sum", axis, false)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, S>> {
        self.reduce("mean", axis, true)
    }

    /// Maximum along `axis`; the gradient goes to the first maximal entry.
    pub fn max_axis(self, axis: usize) -> Result<Var<'t, S>> {
        let (value, argmax) = {
            let x = self.tape.value_of(self.id);
            check_axis("max", axis, x.rank())?;
            let (outer, len, inner) = axis_layout(x.shape(), axis);
            let mut out = Vec::with_capacity(outer * inner);
            let mut argmax = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = (o * len) * inner + i;
                    for l in 1..len {
                        let idx = (o * len + l) * inner + i;
                        if x.data()[idx] > x.data()[best] {
                            best = idx;
                        }
                    }
                    out.push(x.data()[best]);
                    argmax.push(best);
                }
            }
            (Tensor::from_parts(reduced_shape(x.shape(), axis), out), argmax)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::Max { x: self.id, argmax },
            rg,
        ))
    }

    pub fn sum(self) -> Var<'t, S> {
        let value = Tensor::scalar(self.tape.value_of(self.id).data().iter().copied().sum());
        let rg = self.requires_grad();
        self.tape.push(value, Op::SumAll(self.id), rg)
    }

    pub fn mean(self) -> Var<'t, S> {
        let n = self.len();
        self.sum().scale(S::one() / S::lit(n as f64))
    }

    fn normalize_along(self, name: &'static str, axis: usize, log: bool) -> Result<Var<'t, S>> {
        let value = {
            let x = self.tape.value_of(self.id);
            check_axis(name, axis, x.rank())?;
            let (outer, len, inner) = axis_layout(x.shape(), axis);
            let mut out = vec![S::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let m = (0..len).map(|l| x.data()[idx(l)]).fold(S::neg_infinity(), S::max);
                    let z: S = (0..len).map(|l| (x.data()[idx(l)] - m).exp()).sum();
                    let lz = z.ln();
                    for l in 0..len {
                        let shifted = x.data()[idx(l)] - m;
                        out[idx(l)] = if log { shifted - lz } else { shifted.exp() / z };
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        };
        let op = if log { Op::LogSoftmax(self.id, axis) } else { Op::Softmax(self.id, axis) };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, op, rg))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, S>> {
        self.normalize_along("softmax", axis, false)
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t, S>> {
        self.normalize_along("log_softmax", axis, true)
    }

    /// `x / max(‖x‖, eps)` along `axis`.
    pub fn l2_normalize(self, axis: usize, eps: S) -> Result<Var<'t, S>> {
        let value = {
            let x = self.tape.value_of(self.id);
            check_axis("l2_normalize", axis, x.rank())?;
            let (outer, len, inner) = axis_layout(x.shape(), axis);
            let mut out = vec![S::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let norm = (0..len).map(|l| x.data()[idx(l)].powi(2)).sum::<S>().sqrt();
                    let denom = norm.max(eps);
                    for l in 0..len {
                        out[idx(l)] = x.data()[idx(l)] / denom;
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::L2Normalize { x: self.id, axis, eps }, rg))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, S>> {
        let value = self.value().reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    /// Selects `index` along `axis`, dropping that axis.
    pub fn take(self, axis: usize, index: usize) -> Result<Var<'t, S>> {
        let value = {
            let x = self.tape.value_of(self.id);
            check_axis("take", axis, x.rank())?;
            if index >= x.shape()[axis] {
                return Err(Error::InvalidArgument(format!(
                    "take: index {index} out of range for axis {axis} of {:?}",
                    x.shape()
                )));
            }
            let (outer, len, inner) = axis_layout(x.shape(), axis);
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                out.extend_from_slice(&x.data()[(o * len + index) * inner..(o * len + index + 1) * inner]);
            }
            Tensor::from_parts(reduced_shape(x.shape(), axis), out)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::Take {
                x: self.id,
                axis,
                index,
            },
            rg,
        ))
    }

    /// Contiguous slice `[start, start+len)` of the last axis.
    pub fn slice_last(self, start: usize, len: usize) -> Result<Var<'t, S>> {
        let value = {
            let x = self.tape.value_of(self.id);
            let last = *x.shape().last().unwrap();
            if len == 0 || start + len > last {
                return Err(Error::InvalidArgument(format!(
                    "slice_last: [{start}, {}) out of range for {:?}",
                    start + len,
                    x.shape()
                )));
            }
            let mut out = Vec::with_capacity(x.len() / last * len);
            for row in x.data().chunks_exact(last) {
                out.extend_from_slice(&row[start..start + len]);
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = len;
            Tensor::from_parts(shape, out)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::SliceLast { x: self.id, start }, rg))
    }

    /// Picks flat elements by index into a 1-D result.
    pub fn gather(self, indices: &[usize]) -> Result<Var<'t, S>> {
        let value = {
            let x = self.tape.value_of(self.id);
            if indices.is_empty() {
                return Err(Error::InvalidArgument("gather: no indices".into()));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
                return Err(Error::InvalidArgument(format!(
                    "gather: index {bad} out of range for {} elements",
                    x.len()
                )));
            }
            Tensor::from_vec(indices.iter().map(|&i| x.data()[i]).collect())
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::Gather {
                x: self.id,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Euclidean distances between all row pairs of an `N×D` matrix.
    pub fn pairwise_distances(self) -> Result<Var<'t, S>> {
        let value = {
            let x = self.tape.value_of(self.id);
            if x.rank() != 2 {
                return Err(rank_error("pairwise_distances", x.shape(), 2));
            }
            let (n, d) = (x.shape()[0], x.shape()[1]);
            let mut out = vec![S::zero(); n * n];
            for i in 0..n {
                for j in i + 1..n {
                    let s: S = (0..d).map(|k| (x.data()[i * d + k] - x.data()[j * d + k]).powi(2)).sum();
                    out[i * n + j] = s.sqrt();
                    out[j * n + i] = out[i * n + j];
                }
            }
            Tensor::from_parts(vec![n, n], out)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::PairwiseDist(self.id), rg))
    }

    /// Stacks equally shaped variables along a new leading axis.
    pub fn stack(vars: &[Var<'t, S>]) -> Result<Var<'t, S>> {
        let first = vars
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack: empty input".into()))?;
        let tape = first.tape;
        let shape = first.shape();
        let mut data = Vec::with_capacity(shape.iter().product::<usize>() * vars.len());
        let mut rg = false;
        for v in vars {
            let t = tape.value_of(v.id);
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
            rg |= tape.nodes.borrow()[v.id].requires_grad;
        }
        let mut out_shape = vec![vars.len()];
        out_shape.extend(&shape);
        let ids = vars.iter().map(|v| v.id).collect();
        Ok(tape.push(Tensor::from_parts(out_shape, data), Op::Stack(ids), rg))
    }
}

#[inline]
fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::InvalidAxis { op, axis, rank });
    }
    Ok(())
}

fn rank_error(op: &'static str, shape: &[usize], rank: usize) -> Error {
    Error::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: format!("expected rank {rank}"),
    }
}
