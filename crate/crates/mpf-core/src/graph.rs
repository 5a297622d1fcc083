//! Reverse-mode differentiation over a static, topologically ordered DAG.
//!
//! Recurrence is realized purely by unrolling: nodes may only reference
//! earlier nodes, so the graph is acyclic by construction and feedback exists
//! only across unrolled time steps. Shapes are inferred when nodes are added,
//! which surfaces infeasible wiring before any data flows.
//!
//! `forward` produces a [`Tape`] of per-node values; `backward` consumes the
//! tape, so running backward without a forward pass is unrepresentable.
//! Gradients accumulate additively into the [`ParameterStore`], giving shared
//! parameters the sum of their per-use gradients.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::layers::{
    conv2d_backward, conv2d_forward, deconv2d_backward, deconv2d_forward, l2scale_backward,
    l2scale_forward, maxpool_backward, maxpool_forward, relu_backward, relu_forward,
    softmax_channels, softmax_channels_backward, ConvSpec, DeconvSpec,
};
use crate::loss::{weighted_ce_backward, weighted_ce_forward};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{Precision, Shape, Tensor};

/// Index of a node within one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds the graph composes.
#[derive(Debug, Clone)]
pub enum Op {
    /// Placeholder bound by name at forward time.
    Input { name: String },
    Conv { spec: ConvSpec, weight: ParamId, bias: Option<ParamId> },
    Deconv { spec: DeconvSpec, weight: ParamId, bias: Option<ParamId> },
    MaxPool { window: (usize, usize), stride: (usize, usize) },
    Relu,
    L2Scale { gamma: ParamId },
    /// Elementwise sum of two equal-shaped inputs.
    Add,
    /// Multiplication by a fixed scalar.
    Scale { factor: f64 },
    Softmax,
    /// Sum of all elements, producing a scalar.
    SumAll,
    /// Weighted per-pixel cross entropy; inputs are (probabilities, labels).
    WeightedCrossEntropy { class_weights: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Shape,
}

#[derive(Debug, Clone)]
pub struct Graph {
    precision: Precision,
    nodes: Vec<Node>,
    outputs: Vec<NodeId>,
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph { precision, nodes: Vec::new(), outputs: Vec::new() }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn set_outputs(&mut self, outputs: Vec<NodeId>) {
        self.outputs = outputs;
    }

    /// Rejects references to nodes that do not exist yet. Because every edge
    /// must point at an earlier node, cycles cannot be constructed.
    fn check_ref(&self, id: NodeId) -> Result<Shape> {
        if id.0 >= self.nodes.len() {
            return Err(Error::InvalidNode(format!(
                "node {} referenced before it exists (graph has {})",
                id.0,
                self.nodes.len()
            )));
        }
        Ok(self.nodes[id.0].shape)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Shape) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs, shape });
        id
    }

    pub fn input(&mut self, name: &str, shape: Shape) -> NodeId {
        self.push(Op::Input { name: name.to_string() }, vec![], shape)
    }

    pub fn conv(
        &mut self,
        x: NodeId,
        spec: ConvSpec,
        weight: ParamId,
        bias: Option<ParamId>,
        params: &ParameterStore,
    ) -> Result<NodeId> {
        let xs = self.check_ref(x)?;
        if params.value(weight).shape() != spec.weight_shape() {
            return Err(Error::ShapeMismatch {
                context: "graph conv weight".into(),
                lhs: params.value(weight).shape().to_string(),
                rhs: spec.weight_shape().to_string(),
            });
        }
        if xs.channels != spec.in_channels {
            return Err(Error::ShapeMismatch {
                context: "graph conv input channels".into(),
                lhs: xs.channels.to_string(),
                rhs: spec.in_channels.to_string(),
            });
        }
        let (h, w) = spec.output_size(xs.height, xs.width)?;
        let shape = Shape { batch: xs.batch, channels: spec.out_channels, height: h, width: w };
        Ok(self.push(Op::Conv { spec, weight, bias }, vec![x], shape))
    }

    pub fn deconv(
        &mut self,
        x: NodeId,
        spec: DeconvSpec,
        weight: ParamId,
        bias: Option<ParamId>,
        params: &ParameterStore,
    ) -> Result<NodeId> {
        let xs = self.check_ref(x)?;
        if params.value(weight).shape() != spec.weight_shape() {
            return Err(Error::ShapeMismatch {
                context: "graph deconv weight".into(),
                lhs: params.value(weight).shape().to_string(),
                rhs: spec.weight_shape().to_string(),
            });
        }
        if xs.channels != spec.in_channels {
            return Err(Error::ShapeMismatch {
                context: "graph deconv input channels".into(),
                lhs: xs.channels.to_string(),
                rhs: spec.in_channels.to_string(),
            });
        }
        let (h, w) = spec.output_size(xs.height, xs.width)?;
        let shape = Shape { batch: xs.batch, channels: spec.out_channels, height: h, width: w };
        Ok(self.push(Op::Deconv { spec, weight, bias }, vec![x], shape))
    }

    pub fn maxpool(&mut self, x: NodeId, window: (usize, usize), stride: (usize, usize)) -> Result<NodeId> {
        let xs = self.check_ref(x)?;
        // Shape inference via a dry run on the formula.
        let probe = maxpool_forward(&Tensor::zeros(xs, self.precision), window, stride)?;
        Ok(self.push(Op::MaxPool { window, stride }, vec![x], probe.shape()))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.check_ref(x)?;
        Ok(self.push(Op::Relu, vec![x], xs))
    }

    pub fn l2scale(&mut self, x: NodeId, gamma: ParamId, params: &ParameterStore) -> Result<NodeId> {
        let xs = self.check_ref(x)?;
        let gc = params.value(gamma).shape().channels;
        if gc != 1 && gc != xs.channels {
            return Err(Error::ShapeMismatch {
                context: "graph l2scale gamma".into(),
                lhs: format!("{gc} gamma values"),
                rhs: format!("1 or {}", xs.channels),
            });
        }
        Ok(self.push(Op::L2Scale { gamma }, vec![x], xs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.check_ref(a)?;
        let sb = self.check_ref(b)?;
        if sa != sb {
            return Err(Error::ShapeMismatch {
                context: "graph add".into(),
                lhs: sa.to_string(),
                rhs: sb.to_string(),
            });
        }
        Ok(self.push(Op::Add, vec![a, b], sa))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let xs = self.check_ref(x)?;
        Ok(self.push(Op::Scale { factor }, vec![x], xs))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.check_ref(x)?;
        Ok(self.push(Op::Softmax, vec![x], xs))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_ref(x)?;
        let shape = Shape { batch: 1, channels: 1, height: 1, width: 1 };
        Ok(self.push(Op::SumAll, vec![x], shape))
    }

    pub fn weighted_cross_entropy(
        &mut self,
        probs: NodeId,
        labels: NodeId,
        class_weights: Vec<f64>,
    ) -> Result<NodeId> {
        let ps = self.check_ref(probs)?;
        let ls = self.check_ref(labels)?;
        if class_weights.len() != ps.channels {
            return Err(Error::ShapeMismatch {
                context: "cross entropy class weights".into(),
                lhs: format!("{} weights", class_weights.len()),
                rhs: format!("{} channels", ps.channels),
            });
        }
        if ls.batch != ps.batch || ls.channels != 1 || ls.height != ps.height || ls.width != ps.width {
            return Err(Error::ShapeMismatch {
                context: "cross entropy labels".into(),
                lhs: ls.to_string(),
                rhs: format!("({},1,{},{})", ps.batch, ps.height, ps.width),
            });
        }
        let shape = Shape { batch: 1, channels: 1, height: 1, width: 1 };
        Ok(self.push(Op::WeightedCrossEntropy { class_weights }, vec![probs, labels], shape))
    }
}

/// Per-node values recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    values: Vec<Tensor>,
}

impl Tape {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-node gradients produced by a backward pass. Nodes off the path from
/// the loss have no gradient.
#[derive(Debug)]
pub struct NodeGrads {
    grads: Vec<Option<Tensor>>,
}

impl NodeGrads {
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

/// Evaluates every node once, in topological (construction) order.
pub fn forward(graph: &Graph, inputs: &[(&str, &Tensor)], params: &ParameterStore) -> Result<Tape> {
    let named: HashMap<&str, &Tensor> = inputs.iter().copied().collect();
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.len());
    for node in graph.nodes() {
        let value = match &node.op {
            Op::Input { name } => {
                let t = named
                    .get(name.as_str())
                    .ok_or_else(|| Error::MissingInput(name.clone()))?;
                if t.shape() != node.shape {
                    return Err(Error::ShapeMismatch {
                        context: format!("input '{name}'"),
                        lhs: t.shape().to_string(),
                        rhs: node.shape.to_string(),
                    });
                }
                if t.precision() != graph.precision() {
                    return Err(Error::ShapeMismatch {
                        context: format!("input '{name}' precision"),
                        lhs: format!("{:?}", t.precision()),
                        rhs: format!("{:?}", graph.precision()),
                    });
                }
                (*t).clone()
            }
            Op::Conv { spec, weight, bias } => {
                let x = &values[node.inputs[0].0];
                conv2d_forward(x, spec, params.value(*weight), bias.map(|b| params.value(b)))?
            }
            Op::Deconv { spec, weight, bias } => {
                let x = &values[node.inputs[0].0];
                deconv2d_forward(x, spec, params.value(*weight), bias.map(|b| params.value(b)))?
            }
            Op::MaxPool { window, stride } => {
                maxpool_forward(&values[node.inputs[0].0], *window, *stride)?
            }
            Op::Relu => relu_forward(&values[node.inputs[0].0]),
            Op::L2Scale { gamma } => {
                l2scale_forward(&values[node.inputs[0].0], params.value(*gamma))?
            }
            Op::Add => values[node.inputs[0].0].ewise_add(&values[node.inputs[1].0])?,
            Op::Scale { factor } => values[node.inputs[0].0].scale(*factor),
            Op::Softmax => softmax_channels(&values[node.inputs[0].0]),
            Op::SumAll => {
                let sum: f64 = values[node.inputs[0].0].data().iter().sum();
                Tensor::scalar(graph.precision(), sum)
            }
            Op::WeightedCrossEntropy { class_weights } => {
                let probs = &values[node.inputs[0].0];
                let labels = &values[node.inputs[1].0];
                let loss = weighted_ce_forward(probs, labels, class_weights)?;
                Tensor::scalar(graph.precision(), loss)
            }
        };
        values.push(value);
    }
    Ok(Tape { values })
}

fn add_into(slot: &mut Option<Tensor>, delta: Tensor) -> Result<()> {
    match slot {
        Some(existing) => {
            *existing = existing.ewise_add(&delta)?;
        }
        None => *slot = Some(delta),
    }
    Ok(())
}

/// Backpropagates from a scalar loss node, accumulating parameter gradients
/// into `params` (additively; call `zero_grads` first for a fresh step).
pub fn backward(
    graph: &Graph,
    tape: &Tape,
    loss: NodeId,
    params: &mut ParameterStore,
) -> Result<NodeGrads> {
    let shape = graph.shape(loss);
    if !shape.is_scalar() {
        return Err(Error::NonScalarLoss { shape: shape.to_string() });
    }
    let seed = Tensor::scalar(graph.precision(), 1.0);
    backward_seeded(graph, tape, loss, seed, params)
}

/// Backpropagates an arbitrary seed gradient from any node. Used by the
/// receptive-field analyzer to trace single-unit influence.
pub fn backward_seeded(
    graph: &Graph,
    tape: &Tape,
    start: NodeId,
    seed: Tensor,
    params: &mut ParameterStore,
) -> Result<NodeGrads> {
    if start.0 >= graph.len() {
        return Err(Error::InvalidNode(format!("backward start node {}", start.0)));
    }
    if seed.shape() != graph.shape(start) {
        return Err(Error::ShapeMismatch {
            context: "backward seed".into(),
            lhs: seed.shape().to_string(),
            rhs: graph.shape(start).to_string(),
        });
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; graph.len()];
    grads[start.0] = Some(seed);

    for idx in (0..=start.0).rev() {
        let Some(g) = grads[idx].take() else { continue };
        let node = &graph.nodes[idx];
        match &node.op {
            Op::Input { .. } => {
                // Leaf; keep the gradient readable by the caller.
                grads[idx] = Some(g);
                continue;
            }
            Op::Conv { spec, weight, bias } => {
                let x = tape.value(node.inputs[0]);
                let (dx, dw, db) =
                    conv2d_backward(x, spec, params.value(*weight), &g, bias.is_some())?;
                params.accumulate_grad(*weight, &dw)?;
                if let (Some(b), Some(db)) = (bias, db) {
                    params.accumulate_grad(*b, &db)?;
                }
                add_into(&mut grads[node.inputs[0].0], dx)?;
            }
            Op::Deconv { spec, weight, bias } => {
                let x = tape.value(node.inputs[0]);
                let (dx, dw, db) =
                    deconv2d_backward(x, spec, params.value(*weight), &g, bias.is_some())?;
                params.accumulate_grad(*weight, &dw)?;
                if let (Some(b), Some(db)) = (bias, db) {
                    params.accumulate_grad(*b, &db)?;
                }
                add_into(&mut grads[node.inputs[0].0], dx)?;
            }
            Op::MaxPool { window, stride } => {
                let dx = maxpool_backward(tape.value(node.inputs[0]), *window, *stride, &g)?;
                add_into(&mut grads[node.inputs[0].0], dx)?;
            }
            Op::Relu => {
                let dx = relu_backward(tape.value(node.inputs[0]), &g);
                add_into(&mut grads[node.inputs[0].0], dx)?;
            }
            Op::L2Scale { gamma } => {
                let (dx, dgamma) =
                    l2scale_backward(tape.value(node.inputs[0]), params.value(*gamma), &g)?;
                params.accumulate_grad(*gamma, &dgamma)?;
                add_into(&mut grads[node.inputs[0].0], dx)?;
            }
            Op::Add => {
                add_into(&mut grads[node.inputs[0].0], g.clone())?;
                add_into(&mut grads[node.inputs[1].0], g)?;
            }
            Op::Scale { factor } => {
                add_into(&mut grads[node.inputs[0].0], g.scale(*factor))?;
            }
            Op::Softmax => {
                // Backward is expressed in terms of the forward output.
                let probs = tape.value(NodeId(idx));
                let dx = softmax_channels_backward(probs, &g);
                add_into(&mut grads[node.inputs[0].0], dx)?;
            }
            Op::SumAll => {
                let xs = graph.shape(node.inputs[0]);
                let dx = Tensor::full(xs, graph.precision(), g.scalar_value());
                add_into(&mut grads[node.inputs[0].0], dx)?;
            }
            Op::WeightedCrossEntropy { class_weights } => {
                let probs = tape.value(node.inputs[0]);
                let labels = tape.value(node.inputs[1]);
                let dprobs = weighted_ce_backward(probs, labels, class_weights, g.scalar_value())?;
                add_into(&mut grads[node.inputs[0].0], dprobs)?;
                // Labels are not differentiable; no gradient flows to them.
            }
        }
        grads[idx] = None;
    }
    // The start node's own gradient was consumed above unless it is an input.
    Ok(NodeGrads { grads })
}
