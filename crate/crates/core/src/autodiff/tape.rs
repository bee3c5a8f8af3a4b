use std::cell::{Ref, RefCell};
use std::fmt;

use super::kernels::{self, Dims4};
use crate::error::TensorError;
use crate::tensor::{gemm, Tensor};

/// Recorded primitive. Parent references are node indices on the same tape,
/// always smaller than the index of the node holding the op.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    /// `b` is broadcast over the leading axis of `a` when `broadcast` is set.
    Add { a: usize, b: usize, broadcast: bool },
    Mul { a: usize, b: usize, broadcast: bool },
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Sum(usize),
    MatMul(usize, usize),
    Transpose(usize),
    CausalConv { x: usize, kernel: usize, dilation: usize },
    Conv1x1 { x: usize, weight: usize, bias: usize },
    Concat(Vec<usize>),
    SoftmaxRows(usize),
    Dense { x: usize, weight: usize, bias: usize },
    Reshape(usize),
    NodeMix { x: usize, adj: usize },
    AddScaledIdentity { a: usize, alpha: usize },
    Mse { pred: usize, target: Tensor },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Linear record of one forward pass. Nodes are appended in evaluation
/// order, so the record is topologically sorted by construction.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
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

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    /// Reverse sweep from a single-element `loss`. Gradients of every leaf
    /// that requires them are accumulated across all of its uses.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to a different tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes()[self.id].requires_grad
    }

    /// Single-element value.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes();
        let v = &nodes[self.id].value;
        assert_eq!(v.numel(), 1, "item() on non-scalar {:?}", v.shape());
        v.data()[0]
    }
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn with_shape(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::from_parts(like.shape().to_vec(), data)
}

pub(crate) fn transpose(data: &[f64], rows: usize, cols: usize) -> Tensor {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    Tensor::from_parts(vec![cols, rows], out)
}

/// Sums a `[batch, rest..]` gradient over the leading axis.
fn reduce_batch(g: &[f64], inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; inner];
    for chunk in g.chunks_exact(inner) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn backprop_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].requires_grad;
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b, broadcast } => {
            if wants(*a) {
                accumulate(nodes, grads, *a, g.clone());
            }
            if wants(*b) {
                let db = if *broadcast {
                    with_shape(val(*b), reduce_batch(gd, val(*b).numel()))
                } else {
                    g.clone()
                };
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Mul { a, b, broadcast } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let inner = bv.len();
            if wants(*a) {
                let da = gd.iter().enumerate().map(|(i, &gi)| gi * bv[i % inner]).collect();
                accumulate(nodes, grads, *a, with_shape(val(*a), da));
            }
            if wants(*b) {
                let prod: Vec<f64> = gd.iter().zip(av).map(|(gi, ai)| gi * ai).collect();
                let db = if *broadcast { reduce_batch(&prod, inner) } else { prod };
                accumulate(nodes, grads, *b, with_shape(val(*b), db));
            }
        }
        Op::Tanh(a) => {
            let y = node.value.data();
            let da = gd.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
            accumulate(nodes, grads, *a, with_shape(g, da));
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            let da = gd.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
            accumulate(nodes, grads, *a, with_shape(g, da));
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            let da = gd.iter().zip(x).map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 }).collect();
            accumulate(nodes, grads, *a, with_shape(g, da));
        }
        Op::Sum(a) => {
            accumulate(nodes, grads, *a, Tensor::full(val(*a).shape(), gd[0]));
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, p) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if wants(*a) {
                let mut da = vec![0.0; m * k];
                gemm(m, p, k, gd, (p, 1), bv.data(), (1, p), &mut da, (k, 1), false);
                accumulate(nodes, grads, *a, with_shape(av, da));
            }
            if wants(*b) {
                let mut db = vec![0.0; k * p];
                gemm(k, m, p, av.data(), (1, k), gd, (p, 1), &mut db, (p, 1), false);
                accumulate(nodes, grads, *b, with_shape(bv, db));
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (g.shape()[0], g.shape()[1]);
            accumulate(nodes, grads, *a, transpose(gd, r, c));
        }
        Op::CausalConv { x, kernel, dilation } => {
            let (xv, kv) = (val(*x), val(*kernel));
            let dims = Dims4::from_shape(xv.shape());
            let (co, ks) = (kv.shape()[0], kv.shape()[2]);
            let (dx, dk) = kernels::causal_conv_backward(
                gd,
                xv.data(),
                dims,
                kv.data(),
                co,
                ks,
                *dilation,
                wants(*x),
                wants(*kernel),
            );
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, with_shape(xv, dx));
            }
            if let Some(dk) = dk {
                accumulate(nodes, grads, *kernel, with_shape(kv, dk));
            }
        }
        Op::Conv1x1 { x, weight, bias } => {
            let (xv, wv) = (val(*x), val(*weight));
            let dims = Dims4::from_shape(xv.shape());
            let out = kernels::conv1x1_backward(
                gd,
                xv.data(),
                dims,
                wv.data(),
                wv.shape()[0],
                (wants(*x), wants(*weight), wants(*bias)),
            );
            if let Some(dx) = out.dx {
                accumulate(nodes, grads, *x, with_shape(xv, dx));
            }
            if let Some(dw) = out.dweight {
                accumulate(nodes, grads, *weight, with_shape(wv, dw));
            }
            if let Some(db) = out.dbias {
                accumulate(nodes, grads, *bias, with_shape(val(*bias), db));
            }
        }
        Op::Concat(parts) => {
            let batch = g.shape()[0];
            let total_inner = g.numel() / batch;
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let inner = pv.numel() / batch;
                if wants(p) {
                    let mut dp = Vec::with_capacity(pv.numel());
                    for b in 0..batch {
                        let start = b * total_inner + offset;
                        dp.extend_from_slice(&gd[start..start + inner]);
                    }
                    accumulate(nodes, grads, p, with_shape(pv, dp));
                }
                offset += inner;
            }
        }
        Op::SoftmaxRows(a) => {
            let cols = g.shape()[1];
            let da = kernels::softmax_rows_backward(gd, node.value.data(), cols);
            accumulate(nodes, grads, *a, with_shape(g, da));
        }
        Op::Dense { x, weight, bias } => {
            let (xv, wv) = (val(*x), val(*weight));
            let (batch, feat) = (xv.shape()[0], xv.shape()[1]);
            let outs = wv.shape()[0];
            if wants(*x) {
                let mut dx = vec![0.0; batch * feat];
                gemm(batch, outs, feat, gd, (outs, 1), wv.data(), (feat, 1), &mut dx, (feat, 1), false);
                accumulate(nodes, grads, *x, with_shape(xv, dx));
            }
            if wants(*weight) {
                let mut dw = vec![0.0; outs * feat];
                gemm(outs, batch, feat, gd, (1, outs), xv.data(), (feat, 1), &mut dw, (feat, 1), false);
                accumulate(nodes, grads, *weight, with_shape(wv, dw));
            }
            if wants(*bias) {
                accumulate(nodes, grads, *bias, with_shape(val(*bias), reduce_batch(gd, outs)));
            }
        }
        Op::Reshape(a) => {
            accumulate(nodes, grads, *a, with_shape(val(*a), gd.to_vec()));
        }
        Op::NodeMix { x, adj } => {
            let (xv, av) = (val(*x), val(*adj));
            let dims = Dims4::from_shape(xv.shape());
            let (dx, dadj) =
                kernels::node_mix_backward(gd, xv.data(), dims, av.data(), wants(*x), wants(*adj));
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, with_shape(xv, dx));
            }
            if let Some(da) = dadj {
                accumulate(nodes, grads, *adj, with_shape(av, da));
            }
        }
        Op::AddScaledIdentity { a, alpha } => {
            if wants(*a) {
                accumulate(nodes, grads, *a, g.clone());
            }
            if wants(*alpha) {
                let n = g.shape()[0];
                let trace = (0..n).map(|i| gd[i * n + i]).sum();
                accumulate(nodes, grads, *alpha, Tensor::scalar(trace));
            }
        }
        Op::Mse { pred, target } => {
            let p = val(*pred);
            let scale = 2.0 * gd[0] / p.numel() as f64;
            let dp = p
                .data()
                .iter()
                .zip(target.data())
                .map(|(pi, ti)| scale * (pi - ti))
                .collect();
            accumulate(nodes, grads, *pred, with_shape(p, dp));
        }
    }
}
