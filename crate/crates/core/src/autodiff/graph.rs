//! Computation graph with eager forward evaluation and reverse-mode backward.

use std::sync::Arc;

use super::ops::{eval_primitive, vjp, Op};
use super::tensor::{Scalar, Tensor};
use super::TensorError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    requires_grad: bool,
    name: Option<String>,
}

/// A straight-line program over tensors.
///
/// Nodes are appended in topological order and evaluated eagerly as they are
/// added; the recorded ops can be replayed with different leaf values.
#[derive(Clone, Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    adjoint_fault: Option<(NodeId, f64)>,
}

/// Gradients of a scalar root with respect to every node.
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `node`; all zeros when the root does not depend on it.
    pub fn wrt(&self, node: NodeId) -> Tensor<T> {
        match &self.grads[node.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[node.0]),
        }
    }

    pub fn get(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.grads[node.0].as_ref()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            adjoint_fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool, name: Option<String>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
            name,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, true, None)
    }

    pub fn param_named(&mut self, name: impl Into<String>, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, true, Some(name.into()))
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, false, None)
    }

    /// Append `op` applied to `inputs`, evaluating it immediately.
    pub fn apply(&mut self, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId, TensorError> {
        let value = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            eval_primitive(&op, &vals)?
        };
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
            requires_grad,
            name: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::MatMul { trans_b: false }, &[a, b])
    }

    /// `a · bᵀ` with `b` stored as `[n, k]` (or `[s, n, k]`).
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::MatMul { trans_b: true }, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Relu, &[x])
    }

    pub fn softmax(&mut self, x: NodeId, zero_slot: bool) -> Result<NodeId, TensorError> {
        self.apply(Op::Softmax { zero_slot }, &[x])
    }

    pub fn layer_norm(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::LayerNorm, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Sum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Mean, &[x])
    }

    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::SquaredError, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId, TensorError> {
        self.apply(Op::Scale(c), &[x])
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId, TensorError> {
        self.apply(Op::Concat, xs)
    }

    pub fn mask_fill(&mut self, x: NodeId, mask: Arc<[bool]>, value: T) -> Result<NodeId, TensorError> {
        self.apply(Op::MaskFill { mask, value }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }

    pub fn value(&self, node: NodeId) -> &Tensor<T> {
        &self.nodes[node.0].value
    }

    pub fn name(&self, node: NodeId) -> Option<&str> {
        self.nodes[node.0].name.as_deref()
    }

    pub fn op(&self, node: NodeId) -> &Op<T> {
        &self.nodes[node.0].op
    }

    /// Leaves that take gradients, in creation order.
    pub fn params(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.requires_grad)
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    /// Test fixture: scale every gradient that `node` propagates to its inputs.
    #[doc(hidden)]
    pub fn inject_adjoint_fault(&mut self, node: NodeId, factor: f64) {
        self.adjoint_fault = Some((node, factor));
    }

    /// Reverse-mode gradients of the scalar `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>, TensorError> {
        let root_val = &self.nodes[root.0].value;
        if root_val.numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: root_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(root_val.shape(), T::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            let wanted: Vec<bool> = node.inputs.iter().map(|id| self.nodes[id.0].requires_grad).collect();
            let mut contributions = vjp(&node.op, &inputs, &node.value, &g, &wanted);
            if let Some((fault, factor)) = self.adjoint_fault {
                if fault.0 == idx {
                    let f = T::lit(factor);
                    for c in contributions.iter_mut().flatten() {
                        *c = c.map(|v| v * f);
                    }
                }
            }
            for (input, contrib) in node.inputs.iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a = *a + *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Re-evaluate the recorded program up to `root` with some leaves replaced.
    pub fn replay(&self, root: NodeId, overrides: &[(NodeId, &Tensor<T>)]) -> Result<Tensor<T>, TensorError> {
        let mut values: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        for idx in 0..=root.0 {
            let node = &self.nodes[idx];
            let value = if matches!(node.op, Op::Leaf) {
                match overrides.iter().find(|(id, _)| id.0 == idx) {
                    Some((_, v)) => (*v).clone(),
                    None => node.value.clone(),
                }
            } else {
                let ins: Vec<&Tensor<T>> = node
                    .inputs
                    .iter()
                    .map(|id| values[id.0].as_ref().expect("topological order"))
                    .collect();
                eval_primitive(&node.op, &ins)?
            };
            values[idx] = Some(value);
        }
        Ok(values.pop().flatten().expect("root evaluated"))
    }
}
