//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Every forward operation appends one node holding its result and the ids
//! of its parents; ids therefore increase topologically, and a single
//! reverse sweep visits children before parents. A tape is consumed by
//! exactly one backward pass per recording. [`Var`] is a copyable handle
//! tied to its tape's lifetime.

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};

use super::kernels::{
    bilinear_backward, bilinear_sample, col2im, conv_out_dim, im2col, matmul_nn, matmul_nt,
    matmul_tn,
};
use super::special::{digamma, trigamma};
use super::{binary_broadcast, reduce_to_shape, Tensor};

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    AddScalar(usize),
    Scale(usize, f64),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Digamma(usize),
    Huber(usize, f64),
    Sum(usize),
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Pad(usize, Vec<(usize, usize)>),
    Slice(usize, Vec<(usize, usize)>),
    ConcatChannels(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    DeformConv2d {
        x: usize,
        off: usize,
        w: usize,
        b: usize,
        pad: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    AvgPool2(usize),
    GlobalAvgPool(usize),
    Gram(usize),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recording graph. Single-owner; not shareable across threads.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input node; receives a gradient on backward.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input node (data, masks, targets).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn unary<F>(&self, op: &'static str, a: usize, f: F, mk: impl FnOnce(usize) -> Op) -> Var<'_>
    where
        F: FnOnce(&Tensor) -> Tensor,
    {
        let _ = op;
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[a].value), nodes[a].requires_grad)
        };
        self.push(mk(a), value, rg)
    }

    fn binary_elem(
        &self,
        op: &'static str,
        a: usize,
        b: usize,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(usize, usize) -> Op,
    ) -> Var<'_> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (
                binary_broadcast(op, &nodes[a].value, &nodes[b].value, f),
                nodes[a].requires_grad || nodes[b].requires_grad,
            )
        };
        self.push(mk(a, b), value, rg)
    }

    /// Accumulates gradients from `root` (a one-element tensor) into every
    /// reachable leaf, consuming the recording.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        assert!(
            std::ptr::eq(root.tape, self),
            "backward root belongs to a different tape"
        );
        if self.consumed.replace(true) {
            return Err(Error::GraphConsumed);
        }
        let mut nodes_ref = self.nodes.borrow_mut();
        let nodes = &mut *nodes_ref;
        if nodes[root.id].value.len() != 1 {
            return Err(Error::NonScalarRoot(
                nodes[root.id].value.shape().to_vec(),
            ));
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[root.id] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            match &nodes[id].op {
                Op::Leaf => leaf_grads.push((id, g)),
                op => step_backward(nodes, &mut grads, id, op, g),
            }
        }
        for (id, g) in leaf_grads {
            let shape = nodes[id].value.shape().to_vec();
            nodes[id].grad = Some(Tensor::new(shape, g));
        }
        Ok(())
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], id: usize, len: usize) -> &'g mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn wants(nodes: &[Node], id: usize) -> bool {
    nodes[id].requires_grad
}

fn add_reduced(nodes: &[Node], grads: &mut [Option<Vec<f64>>], pid: usize, contrib: &Tensor) {
    let target = nodes[pid].value.shape();
    let reduced = reduce_to_shape(contrib, target);
    let dst = slot(grads, pid, reduced.len());
    for (d, s) in dst.iter_mut().zip(reduced.data()) {
        *d += s;
    }
}

#[allow(clippy::too_many_lines)]
fn step_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    id: usize,
    op: &Op,
    g: Vec<f64>,
) {
    let out_shape = nodes[id].value.shape().to_vec();
    let val = |i: usize| &nodes[i].value;
    match op {
        Op::Leaf => unreachable!("leaves handled by the sweep"),
        Op::Add(a, b) => {
            let gt = Tensor::new(out_shape, g);
            if wants(nodes, *a) {
                add_reduced(nodes, grads, *a, &gt);
            }
            if wants(nodes, *b) {
                add_reduced(nodes, grads, *b, &gt);
            }
        }
        Op::Sub(a, b) => {
            let gt = Tensor::new(out_shape, g);
            if wants(nodes, *a) {
                add_reduced(nodes, grads, *a, &gt);
            }
            if wants(nodes, *b) {
                let neg = gt.map(|x| -x);
                add_reduced(nodes, grads, *b, &neg);
            }
        }
        Op::Mul(a, b) => {
            let gt = Tensor::new(out_shape, g);
            if wants(nodes, *a) {
                let term = binary_broadcast("mul-adjoint", &gt, val(*b), |x, y| x * y);
                add_reduced(nodes, grads, *a, &term);
            }
            if wants(nodes, *b) {
                let term = binary_broadcast("mul-adjoint", &gt, val(*a), |x, y| x * y);
                add_reduced(nodes, grads, *b, &term);
            }
        }
        Op::Div(a, b) => {
            let gt = Tensor::new(out_shape, g);
            if wants(nodes, *a) {
                let term = binary_broadcast("div-adjoint", &gt, val(*b), |x, y| x / y);
                add_reduced(nodes, grads, *a, &term);
            }
            if wants(nodes, *b) {
                let quot = binary_broadcast("div-adjoint", val(*a), val(*b), |x, y| -x / (y * y));
                let term = binary_broadcast("div-adjoint", &gt, &quot, |x, y| x * y);
                add_reduced(nodes, grads, *b, &term);
            }
        }
        Op::Neg(a) => {
            let dst = slot(grads, *a, g.len());
            for (d, s) in dst.iter_mut().zip(&g) {
                *d -= s;
            }
        }
        Op::AddScalar(a) => {
            let dst = slot(grads, *a, g.len());
            for (d, s) in dst.iter_mut().zip(&g) {
                *d += s;
            }
        }
        Op::Scale(a, c) => {
            let dst = slot(grads, *a, g.len());
            for (d, s) in dst.iter_mut().zip(&g) {
                *d += c * s;
            }
        }
        Op::Exp(a) => {
            let out = nodes[id].value.data();
            let dst = slot(grads, *a, g.len());
            for i in 0..g.len() {
                dst[i] += g[i] * out[i];
            }
        }
        Op::Log(a) => {
            let x = val(*a).data();
            let dst = slot(grads, *a, g.len());
            for i in 0..g.len() {
                dst[i] += g[i] / x[i];
            }
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            let dst = slot(grads, *a, g.len());
            for i in 0..g.len() {
                if x[i] > 0.0 {
                    dst[i] += g[i];
                }
            }
        }
        Op::Sigmoid(a) => {
            let out = nodes[id].value.data();
            let dst = slot(grads, *a, g.len());
            for i in 0..g.len() {
                dst[i] += g[i] * out[i] * (1.0 - out[i]);
            }
        }
        Op::Softplus(a) => {
            let x = val(*a).data();
            let dst = slot(grads, *a, g.len());
            for i in 0..g.len() {
                dst[i] += g[i] * stable_sigmoid(x[i]);
            }
        }
        Op::Digamma(a) => {
            let x = val(*a).data();
            let dst = slot(grads, *a, g.len());
            for i in 0..g.len() {
                dst[i] += g[i] * trigamma(x[i]);
            }
        }
        Op::Huber(a, delta) => {
            let x = val(*a).data();
            let dst = slot(grads, *a, g.len());
            for i in 0..g.len() {
                dst[i] += g[i] * x[i].clamp(-delta, *delta);
            }
        }
        Op::Sum(a) => {
            let n = val(*a).len();
            let dst = slot(grads, *a, n);
            for d in dst.iter_mut() {
                *d += g[0];
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            if wants(nodes, *a) {
                let dst = slot(grads, *a, m * k);
                matmul_nt(m, n, k, &g, val(*b).data(), dst);
            }
            if wants(nodes, *b) {
                let dst = slot(grads, *b, k * n);
                matmul_tn(k, m, n, val(*a).data(), &g, dst);
            }
        }
        Op::Transpose(a) => {
            let (rows, cols) = (out_shape[0], out_shape[1]);
            let dst = slot(grads, *a, g.len());
            for r in 0..rows {
                for c in 0..cols {
                    dst[c * rows + r] += g[r * cols + c];
                }
            }
        }
        Op::Reshape(a) => {
            let dst = slot(grads, *a, g.len());
            for (d, s) in dst.iter_mut().zip(&g) {
                *d += s;
            }
        }
        Op::Pad(a, pads) => {
            let ranges: Vec<(usize, usize)> = val(*a)
                .shape()
                .iter()
                .zip(pads)
                .map(|(&dim, &(before, _))| (before, before + dim))
                .collect();
            let piece = slice_copy(&g, &out_shape, &ranges);
            let dst = slot(grads, *a, piece.len());
            for (d, s) in dst.iter_mut().zip(&piece) {
                *d += s;
            }
        }
        Op::Slice(a, ranges) => {
            let src_shape = val(*a).shape().to_vec();
            let dst = slot(grads, *a, val(*a).len());
            slice_scatter_add(dst, &src_shape, ranges, &g);
        }
        Op::ConcatChannels(a, b) => {
            let (sa, sb) = (val(*a).shape().to_vec(), val(*b).shape().to_vec());
            let (ca, cb) = (sa[1], sb[1]);
            let plane = sa[2] * sa[3];
            let batch = sa[0];
            if wants(nodes, *a) {
                let dst = slot(grads, *a, val(*a).len());
                for bi in 0..batch {
                    let src = &g[bi * (ca + cb) * plane..][..ca * plane];
                    let d = &mut dst[bi * ca * plane..][..ca * plane];
                    for (x, y) in d.iter_mut().zip(src) {
                        *x += y;
                    }
                }
            }
            if wants(nodes, *b) {
                let dst = slot(grads, *b, val(*b).len());
                for bi in 0..batch {
                    let src = &g[(bi * (ca + cb) + ca) * plane..][..cb * plane];
                    let d = &mut dst[bi * cb * plane..][..cb * plane];
                    for (x, y) in d.iter_mut().zip(src) {
                        *x += y;
                    }
                }
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => {
            conv2d_backward(nodes, grads, id, *x, *w, *b, *stride, *pad, &g);
        }
        Op::DeformConv2d { x, off, w, b, pad } => {
            deform_backward(nodes, grads, id, *x, *off, *w, *b, *pad, &g);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            batch_norm_backward(nodes, grads, *x, *gamma, *beta, mean, inv_std, &g);
        }
        Op::AvgPool2(a) => {
            let s = val(*a).shape();
            let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
            let (oh, ow) = (h / 2, w / 2);
            let dst = slot(grads, *a, val(*a).len());
            for p in 0..bc {
                let gp = &g[p * oh * ow..][..oh * ow];
                let dp = &mut dst[p * h * w..][..h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let share = gp[oy * ow + ox] * 0.25;
                        dp[(2 * oy) * w + 2 * ox] += share;
                        dp[(2 * oy) * w + 2 * ox + 1] += share;
                        dp[(2 * oy + 1) * w + 2 * ox] += share;
                        dp[(2 * oy + 1) * w + 2 * ox + 1] += share;
                    }
                }
            }
        }
        Op::GlobalAvgPool(a) => {
            let s = val(*a).shape();
            let plane = s[2] * s[3];
            let inv = 1.0 / plane as f64;
            let dst = slot(grads, *a, val(*a).len());
            for p in 0..s[0] * s[1] {
                let share = g[p] * inv;
                for d in &mut dst[p * plane..(p + 1) * plane] {
                    *d += share;
                }
            }
        }
        Op::Gram(a) => {
            let s = val(*a).shape();
            let (batch, c, plane) = (s[0], s[1], s[2] * s[3]);
            let inv = 1.0 / plane as f64;
            let f = val(*a).data();
            let dst = slot(grads, *a, val(*a).len());
            let mut gsym = vec![0.0; c * c];
            for bi in 0..batch {
                let gb = &g[bi * c * c..][..c * c];
                for i in 0..c {
                    for j in 0..c {
                        gsym[i * c + j] = (gb[i * c + j] + gb[j * c + i]) * inv;
                    }
                }
                matmul_nn(
                    c,
                    c,
                    plane,
                    &gsym,
                    &f[bi * c * plane..][..c * plane],
                    &mut dst[bi * c * plane..][..c * plane],
                );
            }
        }
    }
}

/// Overflow-free logistic function.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-free log(1 + exp(x)).
pub fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn slice_copy(src: &[f64], src_shape: &[usize], ranges: &[(usize, usize)]) -> Vec<f64> {
    let out_shape: Vec<usize> = ranges.iter().map(|&(s, e)| e - s).collect();
    let n: usize = out_shape.iter().product();
    let mut strides = vec![1usize; src_shape.len()];
    for i in (0..src_shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * src_shape[i + 1];
    }
    let base: usize = ranges
        .iter()
        .zip(&strides)
        .map(|(&(s, _), &st)| s * st)
        .sum();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut flat = base;
    for _ in 0..n {
        out.push(src[flat]);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            flat -= strides[d] * out_shape[d];
        }
    }
    out
}

fn slice_scatter_add(
    dst: &mut [f64],
    dst_shape: &[usize],
    ranges: &[(usize, usize)],
    src: &[f64],
) {
    let out_shape: Vec<usize> = ranges.iter().map(|&(s, e)| e - s).collect();
    let n: usize = out_shape.iter().product();
    debug_assert_eq!(src.len(), n);
    let mut strides = vec![1usize; dst_shape.len()];
    for i in (0..dst_shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dst_shape[i + 1];
    }
    let base: usize = ranges
        .iter()
        .zip(&strides)
        .map(|(&(s, _), &st)| s * st)
        .sum();
    let mut idx = vec![0usize; out_shape.len()];
    let mut flat = base;
    for &v in src.iter().take(n) {
        dst[flat] += v;
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            flat -= strides[d] * out_shape[d];
        }
    }
}

/// Handle to a tape node. Copyable; all arithmetic records new nodes.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    /// The tape this variable is recorded on.
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Single value of a one-element node.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    /// Reads an element without cloning the whole tensor.
    pub fn value_at(&self, i: usize) -> f64 {
        self.tape.nodes.borrow()[self.id].value.data()[i]
    }

    /// Applies `f` to the node's tensor without cloning it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    /// Gradient accumulated by backward; populated for leaves only.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, rhs: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, rhs.tape),
            "operands recorded on different tapes"
        );
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.tape
            .unary("add_scalar", self.id, |t| t.map(|x| x + c), Op::AddScalar)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape
            .unary("scale", self.id, |t| t.map(|x| x * c), |a| Op::Scale(a, c))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary("exp", self.id, |t| t.map(f64::exp), Op::Exp)
    }

    pub fn log(self) -> Var<'t> {
        self.tape.unary("log", self.id, |t| t.map(f64::ln), Op::Log)
    }

    pub fn relu(self) -> Var<'t> {
        self.tape
            .unary("relu", self.id, |t| t.map(|x| x.max(0.0)), Op::Relu)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape
            .unary("sigmoid", self.id, |t| t.map(stable_sigmoid), Op::Sigmoid)
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape
            .unary("softplus", self.id, |t| t.map(stable_softplus), Op::Softplus)
    }

    /// Element-wise ψ; every entry must be positive.
    pub fn digamma(self) -> Var<'t> {
        self.tape
            .unary("digamma", self.id, |t| t.map(digamma), Op::Digamma)
    }

    /// Element-wise Huber penalty against zero: ½x² inside |x| ≤ δ, then
    /// linear continuation δ(|x| − δ/2).
    pub fn huber(self, delta: f64) -> Var<'t> {
        assert!(delta > 0.0, "huber delta must be positive, got {delta}");
        self.tape.unary(
            "huber",
            self.id,
            |t| {
                t.map(|x| {
                    if x.abs() <= delta {
                        0.5 * x * x
                    } else {
                        delta * (x.abs() - 0.5 * delta)
                    }
                })
            },
            |a| Op::Huber(a, delta),
        )
    }

    /// Absolute value composed from two rectifications.
    pub fn abs_via_relu(self) -> Var<'t> {
        self.relu() + (-self).relu()
    }

    pub fn sum(self) -> Var<'t> {
        self.tape.unary(
            "sum",
            self.id,
            |t| Tensor::scalar(t.data().iter().sum()),
            Op::Sum,
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.len();
        assert!(n > 0, "mean of an empty tensor");
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Var<'t> {
        self.tape.unary(
            "reshape",
            self.id,
            |t| t.clone().reshaped(shape),
            Op::Reshape,
        )
    }

    pub fn transpose(self) -> Var<'t> {
        self.tape.unary(
            "transpose",
            self.id,
            |t| {
                assert_eq!(t.rank(), 2, "transpose requires rank 2, got {:?}", t.shape());
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let mut out = Tensor::zeros(vec![c, r]);
                for i in 0..r {
                    for j in 0..c {
                        out.data_mut()[j * r + i] = t.data()[i * c + j];
                    }
                }
                out
            },
            Op::Transpose,
        )
    }

    /// Zero-pads each axis by (before, after).
    pub fn pad(self, pads: Vec<(usize, usize)>) -> Var<'t> {
        self.tape.unary(
            "pad",
            self.id,
            |t| {
                assert_eq!(t.rank(), pads.len(), "pad spec rank mismatch");
                let out_shape: Vec<usize> = t
                    .shape()
                    .iter()
                    .zip(&pads)
                    .map(|(&d, &(b, a))| d + b + a)
                    .collect();
                let ranges: Vec<(usize, usize)> = t
                    .shape()
                    .iter()
                    .zip(&pads)
                    .map(|(&d, &(b, _))| (b, b + d))
                    .collect();
                let mut out = Tensor::zeros(out_shape.clone());
                slice_scatter_add(out.data_mut(), &out_shape, &ranges, t.data());
                out
            },
            |a| Op::Pad(a, pads.clone()),
        )
    }

    /// Takes the half-open `ranges` along every axis.
    pub fn slice(self, ranges: Vec<(usize, usize)>) -> Var<'t> {
        self.tape.unary(
            "slice",
            self.id,
            |t| {
                assert_eq!(t.rank(), ranges.len(), "slice spec rank mismatch");
                for (d, &(s, e)) in t.shape().iter().zip(&ranges) {
                    assert!(s < e && e <= *d, "slice range {s}..{e} outside axis of {d}");
                }
                let out_shape: Vec<usize> = ranges.iter().map(|&(s, e)| e - s).collect();
                Tensor::new(out_shape, slice_copy(t.data(), t.shape(), &ranges))
            },
            |a| Op::Slice(a, ranges.clone()),
        )
    }

    /// Concatenates two [B,C,H,W] tensors along channels.
    pub fn concat_channels(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            assert!(
                a.rank() == 4 && b.rank() == 4,
                "concat_channels requires rank 4, got {:?} and {:?}",
                a.shape(),
                b.shape()
            );
            assert!(
                a.shape()[0] == b.shape()[0]
                    && a.shape()[2] == b.shape()[2]
                    && a.shape()[3] == b.shape()[3],
                "concat_channels: incompatible shapes {:?} and {:?}",
                a.shape(),
                b.shape()
            );
            let (batch, ca, cb) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let plane = a.shape()[2] * a.shape()[3];
            let mut data = Vec::with_capacity((ca + cb) * batch * plane);
            for bi in 0..batch {
                data.extend_from_slice(&a.data()[bi * ca * plane..][..ca * plane]);
                data.extend_from_slice(&b.data()[bi * cb * plane..][..cb * plane]);
            }
            (
                Tensor::new(vec![batch, ca + cb, a.shape()[2], a.shape()[3]], data),
                nodes[self.id].requires_grad || nodes[rhs.id].requires_grad,
            )
        };
        self.tape.push(Op::ConcatChannels(self.id, rhs.id), value, rg)
    }

    /// 2-D matrix product.
    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            assert!(
                a.rank() == 2 && b.rank() == 2 && a.shape()[1] == b.shape()[0],
                "matmul: incompatible shapes {:?} and {:?}",
                a.shape(),
                b.shape()
            );
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = Tensor::zeros(vec![m, n]);
            matmul_nn(m, k, n, a.data(), b.data(), out.data_mut());
            (
                out,
                nodes[self.id].requires_grad || nodes[rhs.id].requires_grad,
            )
        };
        self.tape.push(Op::Matmul(self.id, rhs.id), value, rg)
    }

    /// Cross-correlation of [B,Cin,H,W] with [Cout,Cin,k,k] plus bias.
    pub fn conv2d(self, w: Var<'t>, b: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
        self.same_tape(&w);
        self.same_tape(&b);
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (xv, wv, bv) = (
                &nodes[self.id].value,
                &nodes[w.id].value,
                &nodes[b.id].value,
            );
            (
                conv2d_forward(xv, wv, bv, stride, pad),
                nodes[self.id].requires_grad
                    || nodes[w.id].requires_grad
                    || nodes[b.id].requires_grad,
            )
        };
        self.tape.push(
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.id,
                stride,
                pad,
            },
            value,
            rg,
        )
    }

    /// Deformable cross-correlation: each kernel tap of each output location
    /// is displaced by a learned (Δy, Δx) read from `offsets`, and the input
    /// is sampled bilinearly (zero outside bounds). Stride is fixed at 1;
    /// `offsets` is [B, 2k², OH, OW] with channel 2t the Δy and 2t+1 the Δx
    /// of kernel tap t in row-major tap order.
    pub fn deform_conv2d(self, offsets: Var<'t>, w: Var<'t>, b: Var<'t>, pad: usize) -> Var<'t> {
        self.same_tape(&offsets);
        self.same_tape(&w);
        self.same_tape(&b);
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (xv, ov, wv, bv) = (
                &nodes[self.id].value,
                &nodes[offsets.id].value,
                &nodes[w.id].value,
                &nodes[b.id].value,
            );
            (
                deform_forward(xv, ov, wv, bv, pad),
                nodes[self.id].requires_grad
                    || nodes[offsets.id].requires_grad
                    || nodes[w.id].requires_grad
                    || nodes[b.id].requires_grad,
            )
        };
        self.tape.push(
            Op::DeformConv2d {
                x: self.id,
                off: offsets.id,
                w: w.id,
                b: b.id,
                pad,
            },
            value,
            rg,
        )
    }

    /// Training-mode batch normalization over (B,H,W) per channel. Returns
    /// the normalized output plus the batch mean and biased variance so the
    /// caller can fold them into running statistics.
    pub fn batch_norm_train(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        eps: f64,
    ) -> (Var<'t>, Vec<f64>, Vec<f64>) {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (value, mean, var, inv_std, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (xv, gv, bv) = (
                &nodes[self.id].value,
                &nodes[gamma.id].value,
                &nodes[beta.id].value,
            );
            let (out, mean, var, inv_std) = batch_norm_forward(xv, gv, bv, eps);
            (
                out,
                mean,
                var,
                inv_std,
                nodes[self.id].requires_grad
                    || nodes[gamma.id].requires_grad
                    || nodes[beta.id].requires_grad,
            )
        };
        let v = self.tape.push(
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                mean: mean.clone(),
                inv_std,
            },
            value,
            rg,
        );
        (v, mean, var)
    }

    /// 2×2 average pooling with stride 2; spatial extents must be even.
    pub fn avg_pool2(self) -> Var<'t> {
        self.tape.unary(
            "avg_pool2",
            self.id,
            |t| {
                let s = t.shape();
                assert!(
                    t.rank() == 4 && s[2] % 2 == 0 && s[3] % 2 == 0,
                    "avg_pool2 requires even spatial extents, got {s:?}"
                );
                let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut out = Tensor::zeros(vec![s[0], s[1], oh, ow]);
                for p in 0..bc {
                    let src = &t.data()[p * h * w..][..h * w];
                    let dst = &mut out.data_mut()[p * oh * ow..][..oh * ow];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dst[oy * ow + ox] = 0.25
                                * (src[(2 * oy) * w + 2 * ox]
                                    + src[(2 * oy) * w + 2 * ox + 1]
                                    + src[(2 * oy + 1) * w + 2 * ox]
                                    + src[(2 * oy + 1) * w + 2 * ox + 1]);
                        }
                    }
                }
                out
            },
            Op::AvgPool2,
        )
    }

    /// Spatial mean: [B,C,H,W] → [B,C].
    pub fn global_avg_pool(self) -> Var<'t> {
        self.tape.unary(
            "global_avg_pool",
            self.id,
            |t| {
                let s = t.shape();
                assert_eq!(t.rank(), 4, "global_avg_pool requires rank 4, got {s:?}");
                let plane = s[2] * s[3];
                let inv = 1.0 / plane as f64;
                let mut out = Tensor::zeros(vec![s[0], s[1]]);
                for p in 0..s[0] * s[1] {
                    out.data_mut()[p] =
                        t.data()[p * plane..(p + 1) * plane].iter().sum::<f64>() * inv;
                }
                out
            },
            Op::GlobalAvgPool,
        )
    }

    /// Per-sample channel Gram matrix: [B,C,H,W] → [B,C,C] with
    /// G_b = F_b · F_bᵀ / (H·W) over rows flattened to [C, H·W].
    pub fn gram(self) -> Var<'t> {
        self.tape.unary(
            "gram",
            self.id,
            |t| {
                let s = t.shape();
                assert_eq!(t.rank(), 4, "gram requires rank 4, got {s:?}");
                let (batch, c, plane) = (s[0], s[1], s[2] * s[3]);
                let inv = 1.0 / plane as f64;
                let mut out = Tensor::zeros(vec![batch, c, c]);
                for bi in 0..batch {
                    let f = &t.data()[bi * c * plane..][..c * plane];
                    let gb = &mut out.data_mut()[bi * c * c..][..c * c];
                    matmul_nt(c, plane, c, f, f, gb);
                    for v in gb.iter_mut() {
                        *v *= inv;
                    }
                }
                out
            },
            Op::Gram,
        )
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    assert!(
        xs.len() == 4 && ws.len() == 4 && xs[1] == ws[1],
        "conv2d: input {xs:?} incompatible with weights {ws:?}"
    );
    let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, k) = (ws[0], ws[2]);
    assert_eq!(ws[2], ws[3], "conv2d kernel must be square, got {ws:?}");
    assert_eq!(b.len(), cout, "conv2d bias length {} vs {cout} filters", b.len());
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(wd, k, stride, pad);
    let pixels = oh * ow;
    let ck2 = cin * k * k;
    let mut out = Tensor::zeros(vec![batch, cout, oh, ow]);
    let mut cols = vec![0.0; ck2 * pixels];
    for bi in 0..batch {
        im2col(
            &x.data()[bi * cin * h * wd..][..cin * h * wd],
            cin,
            h,
            wd,
            k,
            stride,
            pad,
            &mut cols,
        );
        let out_img = &mut out.data_mut()[bi * cout * pixels..][..cout * pixels];
        matmul_nn(cout, ck2, pixels, w.data(), &cols, out_img);
        for oc in 0..cout {
            let bias = b.data()[oc];
            for v in &mut out_img[oc * pixels..(oc + 1) * pixels] {
                *v += bias;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    out_id: usize,
    x: usize,
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
    g: &[f64],
) {
    let xs = nodes[x].value.shape().to_vec();
    let ws = nodes[w].value.shape().to_vec();
    let os = nodes[out_id].value.shape().to_vec();
    let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, k) = (ws[0], ws[2]);
    let pixels = os[2] * os[3];
    let ck2 = cin * k * k;
    let (need_x, need_w, need_b) = (wants(nodes, x), wants(nodes, w), wants(nodes, b));

    if need_b {
        let db = slot(grads, b, cout);
        for bi in 0..batch {
            let g_img = &g[bi * cout * pixels..][..cout * pixels];
            for oc in 0..cout {
                db[oc] += g_img[oc * pixels..(oc + 1) * pixels].iter().sum::<f64>();
            }
        }
    }
    if !(need_x || need_w) {
        return;
    }
    let mut cols = vec![0.0; ck2 * pixels];
    let mut dcols = vec![0.0; ck2 * pixels];
    for bi in 0..batch {
        let g_img = &g[bi * cout * pixels..][..cout * pixels];
        if need_w {
            im2col(
                &nodes[x].value.data()[bi * cin * h * wd..][..cin * h * wd],
                cin,
                h,
                wd,
                k,
                stride,
                pad,
                &mut cols,
            );
            let dw = slot(grads, w, cout * ck2);
            matmul_nt(cout, pixels, ck2, g_img, &cols, dw);
        }
        if need_x {
            dcols.fill(0.0);
            matmul_tn(ck2, cout, pixels, nodes[w].value.data(), g_img, &mut dcols);
            let dx = slot(grads, x, batch * cin * h * wd);
            col2im(
                &dcols,
                cin,
                h,
                wd,
                k,
                stride,
                pad,
                &mut dx[bi * cin * h * wd..][..cin * h * wd],
            );
        }
    }
}

fn deform_forward(x: &Tensor, off: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
    let (xs, os, ws) = (x.shape(), off.shape(), w.shape());
    assert!(
        xs.len() == 4 && ws.len() == 4 && xs[1] == ws[1],
        "deform_conv2d: input {xs:?} incompatible with weights {ws:?}"
    );
    let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, k) = (ws[0], ws[2]);
    assert_eq!(ws[2], ws[3], "deform_conv2d kernel must be square, got {ws:?}");
    assert_eq!(b.len(), cout);
    let oh = conv_out_dim(h, k, 1, pad);
    let ow = conv_out_dim(wd, k, 1, pad);
    assert_eq!(
        os,
        &[batch, 2 * k * k, oh, ow],
        "deform_conv2d: offsets {os:?} must be [B, 2k², OH, OW] = [{batch}, {}, {oh}, {ow}]",
        2 * k * k
    );
    let pixels = oh * ow;
    let ck2 = cin * k * k;
    let mut out = Tensor::zeros(vec![batch, cout, oh, ow]);
    let mut cols = vec![0.0; ck2 * pixels];
    for bi in 0..batch {
        let img = &x.data()[bi * cin * h * wd..][..cin * h * wd];
        let off_img = &off.data()[bi * 2 * k * k * pixels..][..2 * k * k * pixels];
        for ic in 0..cin {
            let plane = &img[ic * h * wd..][..h * wd];
            for t in 0..k * k {
                let (ky, kx) = (t / k, t % k);
                let off_y = &off_img[(2 * t) * pixels..][..pixels];
                let off_x = &off_img[(2 * t + 1) * pixels..][..pixels];
                let row = &mut cols[(ic * k * k + t) * pixels..][..pixels];
                for p in 0..pixels {
                    let (oy, ox) = (p / ow, p % ow);
                    let py = (oy + ky) as f64 - pad as f64 + off_y[p];
                    let px = (ox + kx) as f64 - pad as f64 + off_x[p];
                    row[p] = bilinear_sample(plane, h, wd, py, px);
                }
            }
        }
        let out_img = &mut out.data_mut()[bi * cout * pixels..][..cout * pixels];
        matmul_nn(cout, ck2, pixels, w.data(), &cols, out_img);
        for oc in 0..cout {
            let bias = b.data()[oc];
            for v in &mut out_img[oc * pixels..(oc + 1) * pixels] {
                *v += bias;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn deform_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    out_id: usize,
    x: usize,
    off: usize,
    w: usize,
    b: usize,
    pad: usize,
    g: &[f64],
) {
    let xs = nodes[x].value.shape().to_vec();
    let ws = nodes[w].value.shape().to_vec();
    let os = nodes[out_id].value.shape().to_vec();
    let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, k) = (ws[0], ws[2]);
    let pixels = os[2] * os[3];
    let ow = os[3];
    let ck2 = cin * k * k;
    let need_x = wants(nodes, x);
    let need_off = wants(nodes, off);
    let need_w = wants(nodes, w);
    let need_b = wants(nodes, b);

    if need_b {
        let db = slot(grads, b, cout);
        for bi in 0..batch {
            let g_img = &g[bi * cout * pixels..][..cout * pixels];
            for oc in 0..cout {
                db[oc] += g_img[oc * pixels..(oc + 1) * pixels].iter().sum::<f64>();
            }
        }
    }
    if !(need_x || need_off || need_w) {
        return;
    }

    let mut cols = vec![0.0; ck2 * pixels];
    let mut dcols = vec![0.0; ck2 * pixels];
    let mut dx_img = vec![0.0; cin * h * wd];
    let mut doff_img = vec![0.0; 2 * k * k * pixels];
    for bi in 0..batch {
        let img = &nodes[x].value.data()[bi * cin * h * wd..][..cin * h * wd];
        let off_img = &nodes[off].value.data()[bi * 2 * k * k * pixels..][..2 * k * k * pixels];
        let g_img = &g[bi * cout * pixels..][..cout * pixels];

        if need_w {
            for ic in 0..cin {
                let plane = &img[ic * h * wd..][..h * wd];
                for t in 0..k * k {
                    let (ky, kx) = (t / k, t % k);
                    let off_y = &off_img[(2 * t) * pixels..][..pixels];
                    let off_x = &off_img[(2 * t + 1) * pixels..][..pixels];
                    let row = &mut cols[(ic * k * k + t) * pixels..][..pixels];
                    for p in 0..pixels {
                        let (oy, ox) = (p / ow, p % ow);
                        let py = (oy + ky) as f64 - pad as f64 + off_y[p];
                        let px = (ox + kx) as f64 - pad as f64 + off_x[p];
                        row[p] = bilinear_sample(plane, h, wd, py, px);
                    }
                }
            }
            let dw = slot(grads, w, cout * ck2);
            matmul_nt(cout, pixels, ck2, g_img, &cols, dw);
        }
        if need_x || need_off {
            dcols.fill(0.0);
            matmul_tn(ck2, cout, pixels, nodes[w].value.data(), g_img, &mut dcols);
            dx_img.fill(0.0);
            doff_img.fill(0.0);
            for t in 0..k * k {
                let (ky, kx) = (t / k, t % k);
                let off_y = &off_img[(2 * t) * pixels..][..pixels];
                let off_x = &off_img[(2 * t + 1) * pixels..][..pixels];
                for p in 0..pixels {
                    let (oy, ox) = (p / ow, p % ow);
                    let py = (oy + ky) as f64 - pad as f64 + off_y[p];
                    let px = (ox + kx) as f64 - pad as f64 + off_x[p];
                    let (mut dpy, mut dpx) = (0.0, 0.0);
                    for ic in 0..cin {
                        let dv = dcols[(ic * k * k + t) * pixels + p];
                        let plane = &img[ic * h * wd..][..h * wd];
                        let dplane = if need_x {
                            Some(&mut dx_img[ic * h * wd..][..h * wd])
                        } else {
                            None
                        };
                        let (gy, gx) = bilinear_backward(plane, h, wd, py, px, dv, dplane);
                        dpy += gy;
                        dpx += gx;
                    }
                    if need_off {
                        doff_img[(2 * t) * pixels + p] += dpy;
                        doff_img[(2 * t + 1) * pixels + p] += dpx;
                    }
                }
            }
            if need_x {
                let dx = slot(grads, x, batch * cin * h * wd);
                for (d, s) in dx[bi * cin * h * wd..][..cin * h * wd]
                    .iter_mut()
                    .zip(&dx_img)
                {
                    *d += s;
                }
            }
            if need_off {
                let doff = slot(grads, off, batch * 2 * k * k * pixels);
                for (d, s) in doff[bi * 2 * k * k * pixels..][..2 * k * k * pixels]
                    .iter_mut()
                    .zip(&doff_img)
                {
                    *d += s;
                }
            }
        }
    }
}

fn batch_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> (Tensor, Vec<f64>, Vec<f64>, Vec<f64>) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "batch_norm requires rank 4, got {s:?}");
    let (batch, c, plane) = (s[0], s[1], s[2] * s[3]);
    assert_eq!(gamma.len(), c, "batch_norm gamma length {} vs {c} channels", gamma.len());
    assert_eq!(beta.len(), c);
    let n = batch * plane;
    assert!(n > 1, "batch_norm needs more than one value per channel");
    let inv_n = 1.0 / n as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for bi in 0..batch {
            acc += x.data()[(bi * c + ch) * plane..][..plane].iter().sum::<f64>();
        }
        mean[ch] = acc * inv_n;
        let mut vacc = 0.0;
        for bi in 0..batch {
            for &v in &x.data()[(bi * c + ch) * plane..][..plane] {
                let d = v - mean[ch];
                vacc += d * d;
            }
        }
        var[ch] = vacc * inv_n;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = Tensor::zeros(s.to_vec());
    for bi in 0..batch {
        for ch in 0..c {
            let (m, is) = (mean[ch], inv_std[ch]);
            let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
            let src = &x.data()[(bi * c + ch) * plane..][..plane];
            let dst = &mut out.data_mut()[(bi * c + ch) * plane..][..plane];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = gm * ((v - m) * is) + bt;
            }
        }
    }
    (out, mean, var, inv_std)
}

#[allow(clippy::too_many_arguments)]
fn batch_norm_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    x: usize,
    gamma: usize,
    beta: usize,
    mean: &[f64],
    inv_std: &[f64],
    g: &[f64],
) {
    let s = nodes[x].value.shape().to_vec();
    let (batch, c, plane) = (s[0], s[1], s[2] * s[3]);
    let n = batch * plane;
    let inv_n = 1.0 / n as f64;
    let xv = nodes[x].value.data();
    let gv = nodes[gamma].value.data();
    let (need_x, need_gamma, need_beta) =
        (wants(nodes, x), wants(nodes, gamma), wants(nodes, beta));

    for ch in 0..c {
        let (m, is) = (mean[ch], inv_std[ch]);
        let mut sum_g = 0.0;
        let mut sum_g_xhat = 0.0;
        for bi in 0..batch {
            let base = (bi * c + ch) * plane;
            for p in 0..plane {
                let gi = g[base + p];
                sum_g += gi;
                sum_g_xhat += gi * (xv[base + p] - m) * is;
            }
        }
        if need_beta {
            slot(grads, beta, c)[ch] += sum_g;
        }
        if need_gamma {
            slot(grads, gamma, c)[ch] += sum_g_xhat;
        }
        if need_x {
            let gm = gv[ch];
            let dx = slot(grads, x, batch * c * plane);
            for bi in 0..batch {
                let base = (bi * c + ch) * plane;
                for p in 0..plane {
                    let xhat = (xv[base + p] - m) * is;
                    dx[base + p] +=
                        gm * is * inv_n * (n as f64 * g[base + p] - sum_g - xhat * sum_g_xhat);
                }
            }
        }
    }
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        self.tape
            .binary_elem("add", self.id, rhs.id, |x, y| x + y, Op::Add)
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        self.tape
            .binary_elem("sub", self.id, rhs.id, |x, y| x - y, Op::Sub)
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        self.tape
            .binary_elem("mul", self.id, rhs.id, |x, y| x * y, Op::Mul)
    }
}

impl<'t> std::ops::Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        self.tape
            .binary_elem("div", self.id, rhs.id, |x, y| x / y, Op::Div)
    }
}

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape
            .unary("neg", self.id, |t| t.map(|x| -x), Op::Neg)
    }
}

impl<'t> std::ops::Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.add_scalar(rhs)
    }
}

impl<'t> std::ops::Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.add_scalar(-rhs)
    }
}

impl<'t> std::ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> std::ops::Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs.scale(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        assert_eq!(x.sigmoid().item(), 0.5);
    }

    #[test]
    fn softplus_at_zero_is_ln_two() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        assert!((x.softplus().item() - 0.6931471805599453).abs() < 1e-15);
    }

    #[test]
    fn matmul_identity_leaves_matrix_unchanged() {
        let tape = Tape::new();
        let mut rng = Rng::new(1);
        let a = Tensor::from_fn(vec![3, 3], |_| rng.normal());
        let eye = tape.constant(Tensor::eye(3));
        let av = tape.constant(a.clone());
        assert_eq!(eye.matmul(av).value(), a);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        let loss = (w * w).sum();
        tape.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_of_sigmoid_at_zero() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(0.0));
        let y = w.sigmoid();
        tape.backward(y).unwrap();
        assert!((w.grad().unwrap().item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn second_backward_is_rejected() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(1.0));
        let y = w.scale(2.0);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::GraphConsumed)));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        let y = w.relu();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(vec![2, 3], |i| i as f64));
        let b = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
        let y = (a + b).sum();
        tape.backward(y).unwrap();
        assert_eq!(a.grad().unwrap().data(), &[1.0; 6]);
        assert_eq!(b.grad().unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn division_gradients_follow_quotient_rule() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(3.0));
        let b = tape.leaf(Tensor::scalar(2.0));
        let y = a / b;
        tape.backward(y).unwrap();
        assert!(close(a.grad().unwrap().item(), 0.5, 1e-14));
        assert!(close(b.grad().unwrap().item(), -0.75, 1e-14));
    }

    #[test]
    fn adjoints_are_linear() {
        // grad(2f + 3g) == 2 grad(f) + 3 grad(g)
        let run = |cf: f64, cg: f64| -> Vec<f64> {
            let tape = Tape::new();
            let w = tape.leaf(Tensor::new(vec![3], vec![0.4, -1.2, 2.0]));
            let f = (w * w).sum();
            let gq = w.sigmoid().sum();
            let y = f.scale(cf) + gq.scale(cg);
            tape.backward(y).unwrap();
            w.grad().unwrap().into_data()
        };
        let combined = run(2.0, 3.0);
        let f_only = run(1.0, 0.0);
        let g_only = run(0.0, 1.0);
        for i in 0..3 {
            let want = 2.0 * f_only[i] + 3.0 * g_only[i];
            assert!((combined[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = Rng::new(2);
        let a0 = Tensor::from_fn(vec![2, 3], |_| rng.normal());
        let b0 = Tensor::from_fn(vec![3, 2], |_| rng.normal());
        let c0 = Tensor::from_fn(vec![2, 2], |_| rng.normal());

        let analytic = {
            let tape = Tape::new();
            let a = tape.leaf(a0.clone());
            let b = tape.leaf(b0.clone());
            let c = tape.constant(c0.clone());
            let y = (a.matmul(b) * c).sum();
            tape.backward(y).unwrap();
            (a.grad().unwrap(), b.grad().unwrap())
        };
        let eval = |a0: &Tensor, b0: &Tensor| -> f64 {
            let tape = Tape::new();
            let a = tape.constant(a0.clone());
            let b = tape.constant(b0.clone());
            let c = tape.constant(c0.clone());
            (a.matmul(b) * c).sum().item()
        };
        let h = 1e-6;
        for i in 0..a0.len() {
            let mut plus = a0.clone();
            plus.data_mut()[i] += h;
            let mut minus = a0.clone();
            minus.data_mut()[i] -= h;
            let fd = (eval(&plus, &b0) - eval(&minus, &b0)) / (2.0 * h);
            assert!(close(analytic.0.data()[i], fd, 1e-7));
        }
        for i in 0..b0.len() {
            let mut plus = b0.clone();
            plus.data_mut()[i] += h;
            let mut minus = b0.clone();
            minus.data_mut()[i] -= h;
            let fd = (eval(&a0, &plus) - eval(&a0, &minus)) / (2.0 * h);
            assert!(close(analytic.1.data()[i], fd, 1e-7));
        }
    }

    #[test]
    fn concat_backward_routes_by_channel() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(vec![1, 2, 1, 2], |i| i as f64));
        let b = tape.leaf(Tensor::from_fn(vec![1, 1, 1, 2], |i| 10.0 + i as f64));
        let cat = a.concat_channels(b);
        assert_eq!(cat.shape(), vec![1, 3, 1, 2]);
        assert_eq!(cat.value().data(), &[0.0, 1.0, 2.0, 3.0, 10.0, 11.0]);
        let weights = tape.constant(Tensor::new(
            vec![1, 3, 1, 2],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        ));
        let y = (cat * weights).sum();
        tape.backward(y).unwrap();
        assert_eq!(a.grad().unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(b.grad().unwrap().data(), &[5.0, 6.0]);
    }

    #[test]
    fn slice_and_pad_are_adjoint_pairs() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(vec![2, 4], |i| i as f64));
        let s = a.slice(vec![(0, 2), (1, 3)]);
        assert_eq!(s.value().data(), &[1.0, 2.0, 5.0, 6.0]);
        let y = s.sum();
        tape.backward(y).unwrap();
        assert_eq!(
            a.grad().unwrap().data(),
            &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]
        );

        let tape2 = Tape::new();
        let b = tape2.leaf(Tensor::new(vec![1, 2], vec![5.0, 7.0]));
        let p = b.pad(vec![(1, 0), (0, 1)]);
        assert_eq!(p.shape(), vec![2, 3]);
        assert_eq!(p.value().data(), &[0.0, 0.0, 0.0, 5.0, 7.0, 0.0]);
        let w = tape2.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y2 = (p * w).sum();
        tape2.backward(y2).unwrap();
        assert_eq!(b.grad().unwrap().data(), &[4.0, 5.0]);
    }

    #[test]
    fn conv_with_identity_kernel_is_identity() {
        // 1×1 kernel holding 1.0 with zero bias copies the input.
        let tape = Tape::new();
        let mut rng = Rng::new(3);
        let x = tape.constant(Tensor::from_fn(vec![2, 1, 4, 4], |_| rng.normal()));
        let w = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let y = x.conv2d(w, b, 1, 0);
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn conv_with_zero_weights_outputs_bias() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![1, 2, 3, 3], |i| i as f64));
        let w = tape.constant(Tensor::zeros(vec![3, 2, 3, 3]));
        let b = tape.constant(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]));
        let y = x.conv2d(w, b, 1, 1);
        let v = y.value();
        for oc in 0..3 {
            for p in 0..9 {
                assert_eq!(v.data()[oc * 9 + p], [0.5, -1.0, 2.0][oc]);
            }
        }
    }

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        let oh = conv_out_dim(h, k, stride, pad);
        let ow = conv_out_dim(wd, k, stride, pad);
        let mut out = Tensor::zeros(vec![batch, cout, oh, ow]);
        for bi in 0..batch {
            for oc in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[oc];
                        for ic in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()
                                        [((bi * cin + ic) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((oc * cin + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                        out.data_mut()[((bi * cout + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_quadruple_loop() {
        let mut rng = Rng::new(4);
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let x0 = Tensor::from_fn(vec![2, 3, 5, 5], |_| rng.normal());
            let w0 = Tensor::from_fn(vec![4, 3, 3, 3], |_| rng.normal());
            let b0 = Tensor::from_fn(vec![4], |_| rng.normal());
            let tape = Tape::new();
            let y = tape
                .constant(x0.clone())
                .conv2d(tape.constant(w0.clone()), tape.constant(b0.clone()), stride, pad);
            let want = naive_conv(&x0, &w0, &b0, stride, pad);
            assert_eq!(y.shape(), want.shape().to_vec());
            for (a, b) in y.value().data().iter().zip(want.data()) {
                assert!(close(*a, *b, 1e-12));
            }
        }
    }

    #[test]
    fn deform_with_zero_offsets_equals_conv_bitwise() {
        let mut rng = Rng::new(5);
        let x0 = Tensor::from_fn(vec![2, 3, 6, 6], |_| rng.normal());
        let w0 = Tensor::from_fn(vec![4, 3, 3, 3], |_| rng.normal());
        let b0 = Tensor::from_fn(vec![4], |_| rng.normal());
        let tape = Tape::new();
        let x = tape.constant(x0);
        let w = tape.constant(w0);
        let b = tape.constant(b0);
        let off = tape.constant(Tensor::zeros(vec![2, 18, 6, 6]));
        let plain = x.conv2d(w, b, 1, 1);
        let deformed = x.deform_conv2d(off, w, b, 1);
        let (pv, dv) = (plain.value(), deformed.value());
        assert_eq!(pv.shape(), dv.shape());
        for (a, b) in pv.data().iter().zip(dv.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "{a} vs {b}");
        }
    }

    #[test]
    fn deform_constant_image_ignores_interior_offsets() {
        // On a constant image, bilinear samples are the constant wherever
        // the displaced tap stays inside the grid, so interior outputs match
        // the zero-offset result.
        let mut rng = Rng::new(6);
        let x0 = Tensor::full(vec![1, 2, 8, 8], 0.7);
        let w0 = Tensor::from_fn(vec![3, 2, 3, 3], |_| rng.normal());
        let b0 = Tensor::from_fn(vec![3], |_| rng.normal());
        let off0 = Tensor::from_fn(vec![1, 18, 6, 6], |_| rng.uniform_in(-0.49, 0.49));
        let tape = Tape::new();
        let x = tape.constant(x0);
        let w = tape.constant(w0);
        let b = tape.constant(b0);
        let zero_off = tape.constant(Tensor::zeros(vec![1, 18, 6, 6]));
        let rand_off = tape.constant(off0);
        let base = x.deform_conv2d(zero_off, w, b, 0).value();
        let moved = x.deform_conv2d(rand_off, w, b, 0).value();
        let (oh, ow) = (6, 6);
        for oc in 0..3 {
            for oy in 1..oh - 1 {
                for ox in 1..ow - 1 {
                    let i = (oc * oh + oy) * ow + ox;
                    assert!(
                        close(base.data()[i], moved.data()[i], 1e-12),
                        "mismatch at {i}"
                    );
                }
            }
        }
    }

    #[test]
    fn deform_integer_offset_matches_shifted_conv() {
        // A constant (+1, 0) displacement on every tap equals convolving the
        // image shifted up by one row (zeros filling the vacated row).
        let (h, w) = (6, 5);
        let ramp = Tensor::from_fn(vec![1, 1, h, w], |i| (i / w) as f64 + 0.5 * (i % w) as f64);
        let mut shifted = Tensor::zeros(vec![1, 1, h, w]);
        for y in 0..h - 1 {
            for x in 0..w {
                shifted.data_mut()[y * w + x] = ramp.data()[(y + 1) * w + x];
            }
        }
        let mut rng = Rng::new(7);
        let w0 = Tensor::from_fn(vec![2, 1, 3, 3], |_| rng.normal());
        let b0 = Tensor::from_fn(vec![2], |_| rng.normal());
        let mut off0 = Tensor::zeros(vec![1, 18, h, w]);
        for t in 0..9 {
            for p in 0..h * w {
                off0.data_mut()[(2 * t) * h * w + p] = 1.0;
            }
        }
        let tape = Tape::new();
        let x = tape.constant(ramp);
        let xs = tape.constant(shifted);
        let wv = tape.constant(w0);
        let bv = tape.constant(b0);
        let off = tape.constant(off0);
        let moved = x.deform_conv2d(off, wv, bv, 1).value();
        let plain = xs.conv2d(wv, bv, 1, 1).value();
        // The top output row reaches above the image where the displaced
        // taps still land inside it while the shifted copy pads zero, so
        // only rows below it are comparable.
        for oc in 0..2 {
            for oy in 1..h {
                for ox in 0..w {
                    let i = (oc * h + oy) * w + ox;
                    assert_eq!(moved.data()[i].to_bits(), plain.data()[i].to_bits());
                }
            }
        }
    }

    #[test]
    fn batch_norm_normalizes_per_channel() {
        let mut rng = Rng::new(8);
        let x0 = Tensor::from_fn(vec![4, 3, 2, 2], |_| rng.uniform_in(-2.0, 5.0));
        let tape = Tape::new();
        let x = tape.constant(x0);
        let gamma = tape.constant(Tensor::full(vec![3], 1.0));
        let beta = tape.constant(Tensor::zeros(vec![3]));
        let (y, mean, var) = x.batch_norm_train(gamma, beta, 1e-5);
        let v = y.value();
        for ch in 0..3 {
            let mut acc = 0.0;
            let mut count = 0.0;
            for bi in 0..4 {
                for p in 0..4 {
                    acc += v.data()[(bi * 3 + ch) * 4 + p];
                    count += 1.0;
                }
            }
            assert!((acc / count).abs() < 1e-12, "channel {ch} mean {}", acc / count);
            assert!(var[ch] > 0.0);
            assert!(mean[ch].is_finite());
        }
    }

    #[test]
    fn avg_pool_and_gap_compute_means() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(
            vec![1, 1, 2, 2],
            vec![1.0, 2.0, 3.0, 4.0],
        ));
        assert_eq!(x.avg_pool2().value().data(), &[2.5]);
        assert_eq!(x.global_avg_pool().value().data(), &[2.5]);
    }

    #[test]
    fn gram_matches_explicit_double_loop() {
        let mut rng = Rng::new(9);
        let x0 = Tensor::from_fn(vec![2, 3, 2, 4], |_| rng.normal());
        let tape = Tape::new();
        let g = tape.constant(x0.clone()).gram().value();
        let plane = 8;
        for bi in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let mut want = 0.0;
                    for p in 0..plane {
                        want += x0.data()[(bi * 3 + i) * plane + p]
                            * x0.data()[(bi * 3 + j) * plane + p];
                    }
                    want /= plane as f64;
                    let got = g.data()[(bi * 3 + i) * 3 + j];
                    assert!(close(got, want, 1e-12));
                }
            }
        }
    }

    #[test]
    fn constant_branches_receive_no_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(3.0));
        let y = w * c;
        tape.backward(y).unwrap();
        assert_eq!(w.grad().unwrap().item(), 3.0);
        assert!(c.grad().is_none());
    }

    #[test]
    fn huber_switches_branches_at_delta() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![0.5, 2.0, -3.0]));
        let h = x.huber(1.0).value();
        assert!((h.data()[0] - 0.125).abs() < 1e-15);
        assert!((h.data()[1] - 1.5).abs() < 1e-15);
        assert!((h.data()[2] - 2.5).abs() < 1e-15);
    }
}
