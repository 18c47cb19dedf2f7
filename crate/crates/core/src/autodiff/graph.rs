use std::collections::BTreeMap;

use super::ops::{backward_op, forward_op, Op};
use super::{Tensor, TensorError};

/// Index of a node inside its [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
}

/// Eagerly evaluated computation record.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it and the record is acyclic by construction. Parameters are named
/// leaves; constants are unnamed leaves that never receive gradients.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

/// Gradients of a scalar loss keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a named trainable leaf. Names must be unique within a graph.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        assert!(
            !self.params.contains_key(name),
            "parameter {name} registered twice"
        );
        let id = self.push(Op::Leaf, Vec::new(), value, true);
        self.params.insert(name.to_owned(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value, false)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Evaluates `op` on existing nodes and records the result.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, TensorError> {
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            forward_op(&op, &vals)?
        };
        let needs_grad = inputs.iter().any(|id| self.nodes[id.0].needs_grad);
        Ok(self.push(op, inputs.to_vec(), value, needs_grad))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Replaces a parameter's value without re-evaluating dependents; call
    /// [`Graph::recompute`] afterwards.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<(), TensorError> {
        let id = self
            .param_id(name)
            .ok_or_else(|| TensorError::Contract(format!("unknown parameter {name}")))?;
        let node = &mut self.nodes[id.0];
        if node.value.shape() != value.shape() {
            return Err(TensorError::Shape(format!(
                "parameter {name} has shape {:?}, replacement has {:?}",
                node.value.shape(),
                value.shape()
            )));
        }
        node.value = value;
        Ok(())
    }

    /// Re-evaluates every non-leaf node in recorded order.
    pub fn recompute(&mut self) -> Result<(), TensorError> {
        for i in 0..self.nodes.len() {
            if self.nodes[i].op == Op::Leaf {
                continue;
            }
            let value = {
                let node = &self.nodes[i];
                let vals: Vec<&Tensor> =
                    node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
                forward_op(&node.op, &vals)?
            };
            self.nodes[i].value = value;
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::MatMul { trans_a: false, trans_b: false }, &[a, b])
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::MatMul { trans_a: false, trans_b: true }, &[a, b])
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

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn softmax_lastdim(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::SoftmaxLastDim, &[x])
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::LayerNormLastDim, &[x, gamma, beta])
    }

    pub fn conv2d_valid(&mut self, x: NodeId, k: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Conv2dValid, &[x, k, b])
    }

    pub fn conv2d_same_time(&mut self, x: NodeId, k: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Conv2dSameTime, &[x, k, b])
    }

    pub fn maxpool2d(&mut self, x: NodeId, kh: usize, kw: usize) -> Result<NodeId, TensorError> {
        self.apply(Op::MaxPool2d { kh, kw }, &[x])
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        self.apply(Op::MeanAxis { axis }, &[x])
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        self.apply(Op::ConcatAxis { axis }, xs)
    }

    pub fn scale(&mut self, x: NodeId, factor: f32) -> Result<NodeId, TensorError> {
        self.apply(Op::Scale { factor }, &[x])
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId, TensorError> {
        self.apply(Op::SliceAxis { axis, start, len }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Transpose2d, &[x])
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::SumAll, &[x])
    }

    pub fn bce_mean(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::BceMean, &[pred, target])
    }

    /// Reverse-mode gradients of a scalar node for every parameter leaf.
    ///
    /// Parameters the loss does not depend on get zero gradients. Multiple
    /// uses of one node accumulate additively.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        let loss_val = self.value(loss);
        if loss_val.len() != 1 {
            return Err(TensorError::Contract(format!(
                "loss must be scalar, got shape {:?}",
                loss_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(loss_val.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if node.op == Op::Leaf || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let vals: Vec<&Tensor> = node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|id| self.nodes[id.0].needs_grad).collect();
            let input_grads = backward_op(&node.op, &vals, &node.value, &g, &needs);
            for (id, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(self
            .params
            .iter()
            .map(|(name, id)| {
                let g = grads
                    .get_mut(id.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.value(*id).shape()));
                (name.clone(), g)
            })
            .collect())
    }
}
