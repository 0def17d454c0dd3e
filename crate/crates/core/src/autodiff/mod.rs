//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass as an append-only
//! list of nodes, so append order is a valid topological order. Operations
//! are methods on the tape taking [`Var`] handles; [`Tape::backward`]
//! consumes the tape and returns the gradient of a scalar loss with respect
//! to every leaf created with `requires_grad = true`.
//!
//! ```
//! use sgareg_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod conv;
mod elementwise;
mod norm;
mod reduce;
mod sampling;
mod shape;
mod window;

pub use conv::ConvOpts;
pub use shape::Axis3;

pub(crate) use elementwise::BinaryKind;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    AddScalar { x: Var },
    Relu { x: Var },
    Gelu { x: Var },
    Sqrt { x: Var },
    ClampMin { x: Var, min: f64 },
    ElemMax { a: Var, b: Var },
    Sum { x: Var },
    SumAxis { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    Reshape { x: Var },
    Transpose2d { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Roll3d { x: Var, axis: Axis3, shift: usize },
    MatMul { x: Var, w: Var },
    Conv3d { x: Var, w: Var, b: Option<Var>, opts: ConvOpts },
    InstanceNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    Upsample2x { x: Var },
    Warp { m: Var, u: Var },
    BoxSum { x: Var, window: usize },
    ForwardDiff { x: Var, axis: Axis3 },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Append-only record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        debug_assert!(
            value.is_finite() || !inputs.iter().all(|v| self.nodes[v.0].value.is_finite()),
            "non-finite output from finite inputs"
        );
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            ));
        }
        let mut acc = GradAcc {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
            sizes: self.nodes.iter().map(|n| n.value.len()).collect(),
        };
        if loss_node.requires_grad {
            acc.grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = acc.grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut acc);
        }
        let mut grads = HashMap::new();
        for (idx, node) in self.nodes.into_iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let data = acc.grads[idx].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                let t = Tensor::new(node.value.shape().to_vec(), data).expect("gradient shape");
                grads.insert(idx, t);
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, idx: usize, g: &[f64], acc: &mut GradAcc) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => elementwise::binary_backward(self, *kind, *a, *b, node, g, acc),
            Op::Scale { x, factor } => acc.add_map(*x, |buf| {
                buf.iter_mut().zip(g).for_each(|(o, gi)| *o += gi * factor)
            }),
            Op::AddScalar { x } => acc.add_slice(*x, g),
            Op::Relu { x } => elementwise::relu_backward(self, *x, g, acc),
            Op::Gelu { x } => elementwise::gelu_backward(self, *x, g, acc),
            Op::Sqrt { x } => elementwise::sqrt_backward(*x, node, g, acc),
            Op::ClampMin { x, min } => elementwise::clamp_min_backward(self, *x, *min, g, acc),
            Op::ElemMax { a, b } => elementwise::elem_max_backward(self, *a, *b, g, acc),
            Op::Sum { x } => acc.add_map(*x, |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::SumAxis { x, axis } => reduce::sum_axis_backward(self, *x, *axis, g, acc),
            Op::Softmax { x, axis } => reduce::softmax_backward(self, *x, *axis, node, g, acc),
            Op::Reshape { x } => acc.add_slice(*x, g),
            Op::Transpose2d { x } => shape::transpose_backward(self, *x, g, acc),
            Op::Concat { parts, axis } => shape::concat_backward(self, parts, *axis, g, acc),
            Op::Narrow { x, axis, start } => shape::narrow_backward(self, *x, *axis, *start, node, g, acc),
            Op::Roll3d { x, axis, shift } => shape::roll_backward(self, *x, *axis, *shift, g, acc),
            Op::MatMul { x, w } => conv::matmul_backward(self, *x, *w, g, acc),
            Op::Conv3d { x, w, b, opts } => conv::conv3d_backward(self, *x, *w, *b, *opts, node, g, acc),
            Op::InstanceNorm { x, gamma, beta, mean, inv_std } => {
                norm::instance_norm_backward(self, *x, *gamma, *beta, mean, inv_std, g, acc)
            }
            Op::Upsample2x { x } => sampling::upsample_backward(self, *x, node, g, acc),
            Op::Warp { m, u } => sampling::warp_backward(self, *m, *u, g, acc),
            Op::BoxSum { x, window } => window::box_sum_backward(self, *x, *window, node, g, acc),
            Op::ForwardDiff { x, axis } => window::forward_diff_backward(self, *x, *axis, g, acc),
        }
    }
}

/// Per-node gradient accumulator used during the backward sweep.
pub(crate) struct GradAcc {
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    sizes: Vec<usize>,
}

impl GradAcc {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Runs `f` on the (zero-initialized on first use) gradient buffer of `v`.
    pub(crate) fn add_map(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires[v.0] {
            return;
        }
        let size = self.sizes[v.0];
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; size]);
        f(buf);
    }

    pub(crate) fn add_slice(&mut self, v: Var, g: &[f64]) {
        self.add_map(v, |buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o += gi));
    }
}

/// Gradients of a loss with respect to the leaves of a consumed tape.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
