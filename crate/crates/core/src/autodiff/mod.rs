//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation on a [`Tape`] computes its value eagerly and records
//! a node with the inputs and any intermediates its backward rule needs.
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use robustseg_core::autodiff::Tape;
//! use robustseg_core::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let half = tape.scale(sq, 0.5);
//! let loss = tape.sum(half);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0, 3.0]);
//! ```

mod conv;
pub mod gradcheck;
mod ops;

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::{Scalar, Tensor};

pub use ops::Activation;

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

/// Backward rule supplied by the caller of [`Tape::custom`]: receives the
/// input values, the output value and the upstream gradient, and returns
/// one gradient per input.
pub type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>>>;

pub(crate) enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv3d {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: conv::ConvGeometry,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    LeakyRelu { x: Var, slope: T },
    Sigmoid { x: Var },
    Exp { x: Var },
    Log { x: Var, floor: T },
    Abs { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Offset { x: Var },
    MulChannels { x: Var, gate: Var },
    Upsample2x { x: Var },
    AvgPool2x { x: Var },
    GlobalAvgPool { x: Var },
    Linear { x: Var, weight: Var, bias: Var },
    Concat { parts: Vec<Var> },
    Slice { x: Var, start: usize },
    Softmax { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    SumSpatial { x: Var },
    Custom {
        name: &'static str,
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Conv3d { .. } => "conv3d",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Abs { .. } => "abs",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::Scale { .. } => "scale",
            Op::Offset { .. } => "offset",
            Op::MulChannels { .. } => "mul_channels",
            Op::Upsample2x { .. } => "upsample2x",
            Op::AvgPool2x { .. } => "avg_pool2x",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Linear { .. } => "fully_connected",
            Op::Concat { .. } => "concat_channels",
            Op::Slice { .. } => "slice_channels",
            Op::Softmax { .. } => "softmax_channels",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumSpatial { .. } => "sum_spatial",
            Op::Custom { name, .. } => name,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv3d { input, weight, bias, .. } => vec![*input, *weight, *bias],
            Op::InstanceNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Linear { x, weight, bias } => vec![*x, *weight, *bias],
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::Div { a, b } => vec![*a, *b],
            Op::MulChannels { x, gate } => vec![*x, *gate],
            Op::Concat { parts } => parts.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
            Op::LeakyRelu { x, .. }
            | Op::Sigmoid { x }
            | Op::Exp { x }
            | Op::Log { x, .. }
            | Op::Abs { x }
            | Op::Scale { x, .. }
            | Op::Offset { x }
            | Op::Upsample2x { x }
            | Op::AvgPool2x { x }
            | Op::GlobalAvgPool { x }
            | Op::Slice { x, .. }
            | Op::Softmax { x }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::SumSpatial { x } => vec![*x],
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Ordered record of every operation evaluated in one forward pass.
///
/// A tape is single-threaded; build one per forward pass (or per worker).
pub struct Tape<T> {
    id: u32,
    nodes: Vec<Node<T>>,
    /// First node that turned finite inputs into a non-finite output (debug builds).
    poisoned: Option<(usize, &'static str)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            poisoned: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// A non-differentiable input (data, labels, noise).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub(crate) fn param_leaf(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Param(id), true)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.node(var).value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.node(var).requires_grad
    }

    pub fn contains(&self, var: Var) -> bool {
        var.tape == self.id && var.index() < self.nodes.len()
    }

    /// Position and name of the first operation whose output is non-finite.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        if self.poisoned.is_some() {
            return self.poisoned;
        }
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(|i| (i, self.nodes[i].op.name()))
    }

    pub(crate) fn params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((id, self.var_at(i))),
            _ => None,
        })
    }

    fn var_at(&self, index: usize) -> Var {
        Var {
            tape: self.id,
            index: index as u32,
        }
    }

    fn node(&self, var: Var) -> &Node<T> {
        assert!(
            var.tape == self.id,
            "variable belongs to tape {} but was used on tape {}",
            var.tape,
            self.id
        );
        &self.nodes[var.index()]
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        if cfg!(debug_assertions) && self.poisoned.is_none() && !value.is_finite() {
            let inputs_finite = op.inputs().iter().all(|&v| self.value(v).is_finite());
            if inputs_finite {
                self.poisoned = Some((self.nodes.len(), op.name()));
            }
        }
        let var = self.var_at(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        var
    }

    /// Records an op whose output requires grad iff any input does.
    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|&v| self.node(v).requires_grad);
        self.push_node(value, op, requires_grad)
    }

    /// Propagates d(loss)/d(node) to every node that requires grad.
    ///
    /// `loss` must be a one-element tensor recorded on this tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.contains(loss) {
            return Err(Error::contract("loss variable is not recorded on this tape"));
        }
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index()] = Some(Tensor::full(loss_value.shape(), T::one()));
        for index in (0..=loss.index()).rev() {
            let node = &self.nodes[index];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[index].take() else {
                continue;
            };
            for (input, g) in self.backward_node(node, &dy) {
                if !self.nodes[input.index()].requires_grad {
                    continue;
                }
                match &mut grads[input.index()] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
            grads[index] = Some(dy);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

/// Gradients of one scalar with respect to every node of a tape.
pub struct Gradients<T> {
    tape: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when the node does not require grad or the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        assert_eq!(var.tape, self.tape, "variable from a different tape");
        self.grads.get(var.index()).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros of `shape` when unreachable.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}
