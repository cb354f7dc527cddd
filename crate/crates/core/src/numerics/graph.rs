//! Define-by-run reverse-mode differentiation.
//!
//! Every forward operation appends a node to the [`Graph`]. Nodes are only
//! ever appended, so insertion order is a topological order and the reverse
//! pass simply walks the node list backwards.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::{Real, Tensor};

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
pub(crate) trait BackwardOp<T: Real> {
    /// Propagates the output gradient into the operation's inputs.
    fn backward(&self, out_grad: &Tensor<T>, sink: &mut GradSink<'_, T>);
}

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    is_leaf: bool,
    op: Option<Box<dyn BackwardOp<T>>>,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    strict: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            strict: false,
        }
    }

    /// A graph that rejects any operation producing NaN or infinity.
    pub fn strict() -> Self {
        Graph {
            nodes: Vec::new(),
            strict: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient `backward` reports.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            is_leaf: true,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records an operation. The backward closure is dropped when no input
    /// participates in differentiation.
    pub(crate) fn push<B: BackwardOp<T> + 'static>(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        backward: B,
    ) -> Result<Var> {
        if self.strict && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            is_leaf: false,
            op: requires_grad.then(|| Box::new(backward) as Box<dyn BackwardOp<T>>),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar node. Returns a gradient for every
    /// parameter leaf created before `loss`, zero-filled when the loss does
    /// not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::one()));
        let mut out = BTreeMap::new();
        for index in (0..=loss.0).rev() {
            let node = &self.nodes[index];
            if !node.requires_grad {
                continue;
            }
            if node.is_leaf {
                let g = grads[index]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.insert(Var(index), g);
                continue;
            }
            let Some(g) = grads[index].take() else {
                continue;
            };
            if let Some(op) = &node.op {
                let mut sink = GradSink {
                    nodes: &self.nodes,
                    grads: &mut grads,
                };
                op.backward(&g, &mut sink);
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Gradient accumulator handed to [`BackwardOp::backward`].
pub(crate) struct GradSink<'a, T: Real> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Tensor<T>>],
}

impl<'a, T: Real> GradSink<'a, T> {
    pub fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn value(&self, var: Var) -> &'a Tensor<T> {
        &self.nodes[var.0].value
    }

    /// Mutable gradient buffer of `var`, zero-initialised on first use.
    pub fn grad_mut(&mut self, var: Var) -> &mut [T] {
        let shape = self.nodes[var.0].value.shape();
        self.grads[var.0]
            .get_or_insert_with(|| Tensor::zeros(shape))
            .data_mut()
    }
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }
}
