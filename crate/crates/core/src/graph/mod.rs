//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation executed on it, in order, together with
//! whatever the backward pass needs. Nodes are only ever appended, so the
//! recording is topologically sorted by construction and a single reverse sweep
//! visits each node once.

mod conv;
mod elementwise;
mod linalg;
mod loss;
mod norm;
mod recurrent;

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use conv::{ceil_div, same_pad_left};
pub use loss::Criterion;

/// `B * T` validity mask for sequences of the given lengths padded to `t`.
pub fn lengths_mask(lengths: &[usize], t: usize) -> Vec<bool> {
    lengths
        .iter()
        .flat_map(|&l| (0..t).map(move |i| i < l))
        .collect()
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub(crate) enum Op<S> {
    Leaf,
    Unary(elementwise::Unary<S>),
    Binary(elementwise::Binary),
    Bias(elementwise::Bias),
    MulConst(elementwise::MulConst<S>),
    Reshape(Var),
    Concat(elementwise::ConcatLast),
    Reduce(elementwise::Reduce),
    MatMul(linalg::MatMul),
    Permute(linalg::Permute),
    RelPos(linalg::RelPosGather),
    LayerNorm(norm::LayerNorm<S>),
    Softmax(norm::Softmax),
    Glu(norm::Glu),
    Conv2d(conv::Conv2d),
    FeaturePool(conv::FeatureMaxPool),
    Depthwise(conv::Depthwise),
    Transposed(conv::Transposed),
    Crop(conv::CropTime),
    TimePool(conv::TimeMaxPool),
    Lstm(recurrent::Lstm<S>),
    Loss(loss::FrameLoss<S>),
}

/// Recorded computation. Eval-mode graphs never drop activations; training
/// graphs carry the dropout generator.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
    rng: Option<ChaCha8Rng>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    /// Evaluation graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            rng: None,
        }
    }

    /// Training graph: dropout masks are drawn from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Self {
            rng: Some(rng),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Constants pass `requires_grad = false`.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter. Repeated requests for the same id
    /// return the same node, so every use feeds one gradient slot.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    pub(crate) fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }

    fn push_raw(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    /// Inverted dropout: surviving entries are scaled by `1/(1-p)`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let n = self.nodes[x.0].value.numel();
        let keep = S::of(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < p {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.mul_const(x, mask)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let out = &self.nodes[loss.0].value;
        if out.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads = GradBuf {
            slots: (0..self.nodes.len()).map(|_| None).collect(),
            nodes: &self.nodes,
        };
        grads.slots[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads.slots[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &dy, &mut grads);
            grads.slots[i] = Some(dy);
        }
        Ok(Gradients { slots: grads.slots })
    }

    fn backward_node(&self, node: &Node<S>, dy: &[S], g: &mut GradBuf<'_, S>) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::Unary(op) => op.backward(nodes, &node.value, dy, g),
            Op::Binary(op) => op.backward(nodes, dy, g),
            Op::Bias(op) => op.backward(nodes, dy, g),
            Op::MulConst(op) => op.backward(dy, g),
            Op::Reshape(x) => g.add(*x, dy),
            Op::Concat(op) => op.backward(nodes, dy, g),
            Op::Reduce(op) => op.backward(nodes, dy, g),
            Op::MatMul(op) => op.backward(nodes, dy, g),
            Op::Permute(op) => op.backward(nodes, dy, g),
            Op::RelPos(op) => op.backward(nodes, dy, g),
            Op::LayerNorm(op) => op.backward(dy, g),
            Op::Softmax(op) => op.backward(&node.value, dy, g),
            Op::Glu(op) => op.backward(nodes, dy, g),
            Op::Conv2d(op) => op.backward(nodes, dy, g),
            Op::FeaturePool(op) => op.backward(nodes, dy, g),
            Op::Depthwise(op) => op.backward(nodes, dy, g),
            Op::Transposed(op) => op.backward(nodes, dy, g),
            Op::Crop(op) => op.backward(nodes, dy, g),
            Op::TimePool(op) => op.backward(nodes, dy, g),
            Op::Lstm(op) => op.backward(nodes, dy, g),
            Op::Loss(op) => op.backward(dy, g),
        }
    }
}

/// Gradient buffers during the reverse sweep. Slots are allocated lazily and
/// only for nodes that require a gradient.
pub(crate) struct GradBuf<'a, S> {
    slots: Vec<Option<Vec<S>>>,
    nodes: &'a [Node<S>],
}

impl<S: Scalar> GradBuf<'_, S> {
    /// Mutable gradient of `v`, or `None` when `v` needs no gradient.
    fn slot(&mut self, v: Var) -> Option<&mut [S]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(
            self.slots[v.0]
                .get_or_insert_with(|| vec![S::zero(); n])
                .as_mut_slice(),
        )
    }

    fn add(&mut self, v: Var, d: &[S]) {
        if let Some(s) = self.slot(v) {
            for (a, b) in s.iter_mut().zip(d) {
                *a += *b;
            }
        }
    }
}

/// Result of [`Graph::backward`]: one optional gradient per node.
pub struct Gradients<S> {
    slots: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.slots.get(v.0).and_then(|s| s.as_deref())
    }
}
