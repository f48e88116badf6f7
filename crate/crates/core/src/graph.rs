//! Define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] is an append-only tape: each node stores the op that produced
//! it, its input node ids and its forward value. Inputs always precede their
//! consumers, so reverse tape order is a valid reverse topological order.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::kernels::{self, Padding};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d { stride: usize, padding: Padding },
    MaxPool { argmax: Vec<u32>, tied: usize },
    Dense,
    LocallyConnected,
    Relu,
    Sigmoid,
    Softmax,
    Gap,
    MulBroadcast,
    Concat { widths: Vec<usize> },
    Add,
    Mul,
    DivRows,
    ClampMin(f64),
    CrossEntropy { targets: Tensor },
    WeightedSum(Vec<f64>),
    Sum,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool",
            Op::Dense => "dense",
            Op::LocallyConnected => "locally_connected_1x1",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Softmax => "softmax",
            Op::Gap => "gap",
            Op::MulBroadcast => "elementwise_mul",
            Op::Concat { .. } => "concat",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::DivRows => "div_rows",
            Op::ClampMin(_) => "clamp_min",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::WeightedSum(_) => "weighted_sum",
            Op::Sum => "sum",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter, summed over every node that read it.
    /// `None` when the parameter did not take part in the loss.
    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        let mut acc: Option<Tensor> = None;
        for &(pid, node) in &self.params {
            if pid != id {
                continue;
            }
            if let Some(g) = self.node(node) {
                match acc.as_mut() {
                    Some(a) => a.add_assign(g),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }

    /// Parameters that received a gradient, in first-use order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = Vec::new();
        for &(pid, _) in &self.params {
            if !ids.contains(&pid) {
                ids.push(pid);
            }
        }
        ids
    }
}

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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).data()[0]
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, ids: &[NodeId]) -> Result<()> {
        match ids.iter().find(|i| i.0 >= self.nodes.len()) {
            Some(bad) => Err(Error::Graph(format!("node {} does not exist", bad.0))),
            None => Ok(()),
        }
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, vec![], value)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(Op::Param(id), vec![], store.value(id).clone())
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: Padding) -> Result<NodeId> {
        self.check(&[x, w, b])?;
        let v = kernels::conv2d(self.value(x), self.value(w), self.value(b), stride, padding)?;
        Ok(self.push(Op::Conv2d { stride, padding }, vec![x, w, b], v))
    }

    pub fn maxpool(&mut self, x: NodeId, k: usize, stride: usize, padding: Padding) -> Result<NodeId> {
        self.check(&[x])?;
        let p = kernels::maxpool2d(self.value(x), k, stride, padding)?;
        Ok(self.push(
            Op::MaxPool {
                argmax: p.argmax,
                tied: p.tied_windows,
            },
            vec![x],
            p.output,
        ))
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[x, w, b])?;
        let v = kernels::dense(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Dense, vec![x, w, b], v))
    }

    pub fn locally_connected(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(&[x, w, b])?;
        let v = kernels::locally_connected_1x1(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::LocallyConnected, vec![x, w, b], v))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let v = kernels::relu(self.value(x));
        Ok(self.push(Op::Relu, vec![x], v))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let v = kernels::sigmoid(self.value(x));
        Ok(self.push(Op::Sigmoid, vec![x], v))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let v = kernels::softmax(self.value(x));
        Ok(self.push(Op::Softmax, vec![x], v))
    }

    pub fn gap(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let v = kernels::gap(self.value(x))?;
        Ok(self.push(Op::Gap, vec![x], v))
    }

    pub fn mul_broadcast(&mut self, volume: NodeId, mask: NodeId) -> Result<NodeId> {
        self.check(&[volume, mask])?;
        let v = kernels::mul_broadcast(self.value(volume), self.value(mask))?;
        Ok(self.push(Op::MulBroadcast, vec![volume, mask], v))
    }

    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        self.check(inputs)?;
        let values: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let v = kernels::concat_features(&values)?;
        let widths = values.iter().map(|t| t.shape()[1]).collect();
        Ok(self.push(Op::Concat { widths }, inputs.to_vec(), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(Op::Add, vec![a, b], v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let v = Tensor::from_fn(x.shape(), |i| x.data()[i] * y.data()[i]);
        Ok(self.push(Op::Mul, vec![a, b], v))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        self.check(&[a, b])?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    /// Divides each row of `x` (B,N) by the matching entry of `s` (B,1).
    pub fn div_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.check(&[x, s])?;
        let (xv, sv) = (self.value(x), self.value(s));
        let [b, n] = match *xv.shape() {
            [b, n] => [b, n],
            ref other => return Err(Error::shape("div_rows", format!("numerator {other:?} is not 2-D"))),
        };
        if sv.shape() != [b, 1] {
            return Err(Error::shape("div_rows", format!("divisor {:?} is not ({b}, 1)", sv.shape())));
        }
        let v = Tensor::from_fn(&[b, n], |i| xv.data()[i] / sv.data()[i / n]);
        Ok(self.push(Op::DivRows, vec![x, s], v))
    }

    pub fn clamp_min(&mut self, x: NodeId, floor: f64) -> Result<NodeId> {
        self.check(&[x])?;
        let v = self.value(x).map(|v| v.max(floor));
        Ok(self.push(Op::ClampMin(floor), vec![x], v))
    }

    pub fn cross_entropy(&mut self, probs: NodeId, targets: &Tensor) -> Result<NodeId> {
        self.check(&[probs])?;
        let loss = kernels::cross_entropy(self.value(probs), targets)?;
        Ok(self.push(
            Op::CrossEntropy {
                targets: targets.clone(),
            },
            vec![probs],
            Tensor::scalar(loss),
        ))
    }

    /// `sum_b weights[b] * terms[b]` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[NodeId], weights: &[f64]) -> Result<NodeId> {
        self.check(terms)?;
        if terms.len() != weights.len() || terms.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} loss terms but {} weights",
                terms.len(),
                weights.len()
            )));
        }
        let mut total = 0.0;
        for (&t, &w) in terms.iter().zip(weights) {
            if self.value(t).len() != 1 {
                return Err(Error::shape("weighted_sum", "terms must be scalars"));
            }
            total += w * self.scalar(t);
        }
        Ok(self.push(Op::WeightedSum(weights.to_vec()), terms.to_vec(), Tensor::scalar(total)))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(&[x])?;
        let v = Tensor::scalar(self.value(x).sum());
        Ok(self.push(Op::Sum, vec![x], v))
    }

    /// Number of max-pool windows whose maximum was tied at forward time.
    pub fn tied_pool_windows(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                Op::MaxPool { tied, .. } => *tied,
                _ => 0,
            })
            .sum()
    }

    /// Hash of every discrete branch taken in the forward pass: max-pool
    /// selections, relu signs and clamp activity. Two evaluations with the
    /// same signature lie on the same smooth piece of the loss.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, n) in self.nodes.iter().enumerate() {
            match &n.op {
                Op::MaxPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::Relu | Op::ClampMin(_) => {
                    i.hash(&mut h);
                    let floor = match n.op {
                        Op::ClampMin(f) => f,
                        _ => 0.0,
                    };
                    for v in self.nodes[n.inputs[0].0].value.data() {
                        (*v > floor).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.check(&[loss])?;
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        let mut params = Vec::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if let Some(bad) = node.inputs.iter().find(|i| i.0 >= idx) {
                return Err(Error::Graph(format!(
                    "node {idx} ({}) consumes node {} which is not earlier on the tape",
                    node.op.name(),
                    bad.0
                )));
            }
            if let Op::Param(pid) = node.op {
                params.push((pid, NodeId(idx)));
            }
            let Some(dy) = grads[idx].take() else { continue };
            for (input, g) in self.local_grads(node, &dy)? {
                match grads[input.0].as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads[input.0] = Some(g),
                }
            }
            grads[idx] = Some(dy);
        }
        params.reverse();
        Ok(Gradients { nodes: grads, params })
    }

    fn local_grads(&self, node: &Node, dy: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let inp = |k: usize| &self.nodes[node.inputs[k].0].value;
        let at = |k: usize| node.inputs[k];
        Ok(match &node.op {
            Op::Input | Op::Param(_) => vec![],
            Op::Conv2d { stride, padding } => {
                let (dx, dw, db) = kernels::conv2d_backward(inp(0), inp(1), inp(2), *stride, *padding, dy)?;
                vec![(at(0), dx), (at(1), dw), (at(2), db)]
            }
            Op::MaxPool { argmax, .. } => {
                vec![(at(0), kernels::maxpool2d_backward(inp(0).shape(), argmax, dy))]
            }
            Op::Dense => {
                let (dx, dw, db) = kernels::dense_backward(inp(0), inp(1), dy);
                vec![(at(0), dx), (at(1), dw), (at(2), db)]
            }
            Op::LocallyConnected => {
                let (dx, dw, db) = kernels::locally_connected_1x1_backward(inp(0), inp(1), dy);
                vec![(at(0), dx), (at(1), dw), (at(2), db)]
            }
            Op::Relu => vec![(at(0), kernels::relu_backward(inp(0), dy))],
            Op::Sigmoid => vec![(at(0), kernels::sigmoid_backward(&node.value, dy))],
            Op::Softmax => vec![(at(0), kernels::softmax_backward(&node.value, dy))],
            Op::Gap => vec![(at(0), kernels::gap_backward(inp(0).shape(), dy))],
            Op::MulBroadcast => {
                let (dv, dm) = kernels::mul_broadcast_backward(inp(0), inp(1), dy);
                vec![(at(0), dv), (at(1), dm)]
            }
            Op::Concat { widths } => node
                .inputs
                .iter()
                .copied()
                .zip(kernels::concat_features_backward(widths, dy))
                .collect(),
            Op::Add => vec![(at(0), dy.clone()), (at(1), dy.clone())],
            Op::Mul => {
                let (a, b) = (inp(0), inp(1));
                vec![
                    (at(0), Tensor::from_fn(a.shape(), |i| dy.data()[i] * b.data()[i])),
                    (at(1), Tensor::from_fn(b.shape(), |i| dy.data()[i] * a.data()[i])),
                ]
            }
            Op::DivRows => {
                let (x, s) = (inp(0), inp(1));
                let n = x.shape()[1];
                let dx = Tensor::from_fn(x.shape(), |i| dy.data()[i] / s.data()[i / n]);
                let ds = Tensor::from_fn(s.shape(), |b| {
                    let sv = s.data()[b];
                    let dot: f64 = (0..n).map(|j| dy.data()[b * n + j] * x.data()[b * n + j]).sum();
                    -dot / (sv * sv)
                });
                vec![(at(0), dx), (at(1), ds)]
            }
            Op::ClampMin(floor) => {
                let x = inp(0);
                vec![(
                    at(0),
                    Tensor::from_fn(x.shape(), |i| if x.data()[i] > *floor { dy.data()[i] } else { 0.0 }),
                )]
            }
            Op::CrossEntropy { targets } => {
                vec![(at(0), kernels::cross_entropy_backward(inp(0), targets, dy.data()[0]))]
            }
            Op::WeightedSum(weights) => node
                .inputs
                .iter()
                .zip(weights)
                .map(|(&i, &w)| (i, Tensor::scalar(w * dy.data()[0])))
                .collect(),
            Op::Sum => vec![(at(0), Tensor::full(inp(0).shape(), dy.data()[0]))],
        })
    }
}
