//! Unrolls an architecture into a feedforward DAG with multi-path feedback.
//!
//! Step 1 is the plain feedforward network: no feedback term and no
//! normalization, so a one-step model is node-for-node identical to the
//! baseline. From step 2 on, every layer in the recurrent set merges its
//! linear output with a transformed copy of the previous step's top-layer
//! output; both branches pass through L2 scale normalization before the
//! elementwise sum. Feedback transforms are convolutions when the target
//! matches the top layer's spatial size and transposed convolutions when the
//! target is larger. Trunk weights are bound once and reused at every step;
//! feedback transforms get distinct parameters per step.
//!
//! The fused output is the weighted sum of the per-step top-layer outputs,
//! and the classifier is a transposed convolution that resizes it to the
//! input resolution, followed by a per-position softmax.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{ArchitectureSpec, LayerKind};
use crate::error::{Error, Result};
use crate::graph::{forward, Graph, NodeId, Op, Tape};
use crate::layers::{ConvSpec, DeconvSpec};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{Precision, Shape, Tensor};

/// Initial value of every normalization scale.
pub const GAMMA_INIT: f64 = 10.0;

#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    pub precision: Precision,
    pub input_size: (usize, usize),
    /// When false, trunk weights get a distinct copy per step instead of one
    /// shared binding. Used to cross-check gradient accumulation.
    pub weight_sharing: bool,
}

impl BuildOptions {
    pub fn new(input_size: (usize, usize), precision: Precision) -> Self {
        BuildOptions { precision, input_size, weight_sharing: true }
    }
}

/// Kernel and padding for an integer upsampling ratio, chosen so the output
/// size is exactly `input * ratio`.
fn upsample_kernel(ratio: usize) -> (usize, usize) {
    if ratio % 2 == 0 {
        (2 * ratio, ratio / 2)
    } else {
        (2 * ratio - 1, (ratio - 1) / 2)
    }
}

#[derive(Debug)]
pub struct UnrolledModel {
    pub arch: ArchitectureSpec,
    pub graph: Graph,
    pub params: ParameterStore,
    pub input: NodeId,
    /// Top-layer output per step, `step_tops[t-1]` for step t.
    pub step_tops: Vec<NodeId>,
    /// Weighted multi-step combination of the top-layer outputs.
    pub fused: NodeId,
    /// Classifier output before softmax.
    pub logits: NodeId,
    /// Per-pixel class probabilities (the designated graph output).
    pub prediction: NodeId,
    pub input_size: (usize, usize),
    // layer_nodes[t-1][l-1] = output node of layer l at step t
    layer_nodes: Vec<Vec<NodeId>>,
}

/// A model graph extended with a label input and the weighted cross-entropy
/// loss node.
#[derive(Debug)]
pub struct TrainingGraph {
    pub graph: Graph,
    pub labels: NodeId,
    pub loss: NodeId,
    pub prediction: NodeId,
}

impl UnrolledModel {
    /// Builds the unrolled graph with freshly registered (zero/default)
    /// parameters. Call [`UnrolledModel::init_params`] for random
    /// initialization or load values from a checkpoint. Returns validation
    /// warnings alongside the model.
    pub fn build(arch: &ArchitectureSpec, opts: BuildOptions) -> Result<(UnrolledModel, Vec<String>)> {
        let warnings = arch.validate()?;
        let precision = opts.precision;
        let (in_h, in_w) = opts.input_size;
        let mut graph = Graph::new(precision);
        let mut params = ParameterStore::new();
        let input = graph.input("image", Shape::new(1, arch.in_channels, in_h, in_w)?);

        let steps = arch.time_steps;
        let mut step_tops: Vec<NodeId> = Vec::with_capacity(steps);
        let mut layer_nodes: Vec<Vec<NodeId>> = Vec::with_capacity(steps);

        for t in 1..=steps {
            let mut current = input;
            let mut channels = arch.in_channels;
            let mut nodes_t = Vec::with_capacity(arch.num_layers());
            for (i, layer) in arch.layers.iter().enumerate() {
                let l = i + 1;
                current = match *layer {
                    LayerKind::Conv { out_channels, kernel, stride, padding, dilation } => {
                        let spec = ConvSpec {
                            in_channels: channels,
                            out_channels,
                            kernel: (kernel, kernel),
                            stride,
                            padding,
                            dilation,
                        };
                        let (w, b) = trunk_params(
                            &mut params,
                            l,
                            t,
                            opts.weight_sharing,
                            steps,
                            arch.bias,
                            spec.weight_shape(),
                            out_channels,
                            precision,
                        )?;
                        let z = graph.conv(current, spec, w, b, &params)?;
                        channels = out_channels;
                        merge_feedback(arch, &mut graph, &mut params, &step_tops, z, l, t, precision)?
                    }
                    LayerKind::Deconv { out_channels, kernel, stride, padding } => {
                        let spec = DeconvSpec {
                            in_channels: channels,
                            out_channels,
                            kernel: (kernel, kernel),
                            stride,
                            padding,
                        };
                        let (w, b) = trunk_params(
                            &mut params,
                            l,
                            t,
                            opts.weight_sharing,
                            steps,
                            arch.bias,
                            spec.weight_shape(),
                            out_channels,
                            precision,
                        )?;
                        let z = graph.deconv(current, spec, w, b, &params)?;
                        channels = out_channels;
                        merge_feedback(arch, &mut graph, &mut params, &step_tops, z, l, t, precision)?
                    }
                    LayerKind::Pool { kernel, stride } => {
                        graph.maxpool(current, (kernel, kernel), (stride, stride))?
                    }
                    LayerKind::Relu => graph.relu(current)?,
                };
                nodes_t.push(current);
            }
            step_tops.push(current);
            layer_nodes.push(nodes_t);
        }

        let fused = fuse_outputs(&mut graph, &step_tops, &arch.fusion_weights)?;
        let (logits, prediction) = attach_classifier(
            &mut graph,
            &mut params,
            fused,
            arch.num_classes,
            opts.input_size,
            arch.bias,
            precision,
        )?;
        graph.set_outputs(vec![prediction]);

        Ok((
            UnrolledModel {
                arch: arch.clone(),
                graph,
                params,
                input,
                step_tops,
                fused,
                logits,
                prediction,
                input_size: opts.input_size,
                layer_nodes,
            },
            warnings,
        ))
    }

    /// Fills weight parameters with fan-in-scaled uniform noise, drawing in
    /// registration order. Biases stay zero and normalization scales stay at
    /// [`GAMMA_INIT`].
    pub fn init_params(&mut self, rng: &mut ChaCha8Rng) {
        // Fan-in per weight parameter, read off the ops that bind it.
        let mut fan_in = vec![None; self.params.len()];
        for node in self.graph.nodes() {
            match &node.op {
                Op::Conv { spec, weight, .. } => {
                    fan_in[weight.index()] =
                        Some(spec.in_channels * spec.kernel.0 * spec.kernel.1);
                }
                Op::Deconv { spec, weight, .. } => {
                    fan_in[weight.index()] =
                        Some(spec.in_channels * spec.kernel.0 * spec.kernel.1);
                }
                _ => {}
            }
        }
        for i in 0..self.params.len() {
            let id = ParamId(i);
            let Some(f) = fan_in[i] else { continue };
            let shape = self.params.get(id).value.shape();
            let precision = self.params.get(id).value.precision();
            // Uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)): keeps activation
            // variance roughly constant through relu stacks.
            let a = (6.0 / f as f64).sqrt();
            let numel = shape.numel();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(rng.gen_range(-a..a));
            }
            let t = Tensor::from_vec(shape, precision, data).expect("matching shape");
            self.params.set_value(id, t).expect("matching shape");
        }
    }

    /// Output node of layer `l` (1-based) at step `t` (1-based).
    pub fn layer_node(&self, l: usize, t: usize) -> Option<NodeId> {
        self.layer_nodes
            .get(t.checked_sub(1)?)
            .and_then(|v| v.get(l.checked_sub(1)?))
            .copied()
    }

    pub fn num_steps(&self) -> usize {
        self.step_tops.len()
    }

    /// Clones the graph and appends a label input plus the weighted
    /// cross-entropy loss over the softmax output.
    pub fn with_loss(&self, class_weights: Vec<f64>) -> Result<TrainingGraph> {
        if class_weights.len() != self.arch.num_classes {
            return Err(Error::InvalidArgument(format!(
                "{} class weights for {} classes",
                class_weights.len(),
                self.arch.num_classes
            )));
        }
        let mut graph = self.graph.clone();
        let (h, w) = self.input_size;
        let labels = graph.input("labels", Shape::new(1, 1, h, w)?);
        let loss = graph.weighted_cross_entropy(self.prediction, labels, class_weights)?;
        graph.set_outputs(vec![loss, self.prediction]);
        Ok(TrainingGraph { graph, labels, loss, prediction: self.prediction })
    }

    /// Runs the prediction graph on one image.
    pub fn forward_predict(&self, image: &Tensor) -> Result<(Tensor, Tape)> {
        let tape = forward(&self.graph, &[("image", image)], &self.params)?;
        Ok((tape.value(self.prediction).clone(), tape))
    }

    /// Copies parameter values from another store by name. Missing or
    /// mismatched entries are errors.
    pub fn load_values(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        for (name, tensor) in values {
            let id = self
                .params
                .id(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))?;
            self.params.set_value(id, tensor.clone())?;
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn trunk_params(
    params: &mut ParameterStore,
    l: usize,
    t: usize,
    weight_sharing: bool,
    steps: usize,
    bias: bool,
    weight_shape: Shape,
    out_channels: usize,
    precision: Precision,
) -> Result<(ParamId, Option<ParamId>)> {
    let (w_name, b_name) = if weight_sharing {
        (format!("W{l}"), format!("b{l}"))
    } else {
        (format!("W{l}@t{t}"), format!("b{l}@t{t}"))
    };
    if let Some(id) = params.id(&w_name) {
        let b = if bias { params.id(&b_name) } else { None };
        return Ok((id, b));
    }
    let shared = weight_sharing && steps > 1;
    let w = params.register(&w_name, Tensor::zeros(weight_shape, precision), shared)?;
    let b = if bias {
        let shape = Shape::new(1, out_channels, 1, 1)?;
        Some(params.register(&b_name, Tensor::zeros(shape, precision), shared)?)
    } else {
        None
    };
    Ok((w, b))
}

/// For layer `l` at step `t >= 2` in the recurrent set: normalize the linear
/// output, transform the previous step's top output (conv for equal spatial
/// size, transposed conv for a larger target), normalize it, and sum.
#[allow(clippy::too_many_arguments)]
fn merge_feedback(
    arch: &ArchitectureSpec,
    graph: &mut Graph,
    params: &mut ParameterStore,
    step_tops: &[NodeId],
    z: NodeId,
    l: usize,
    t: usize,
    precision: Precision,
) -> Result<NodeId> {
    if t == 1 || !arch.recurrent.contains(&l) {
        return Ok(z);
    }
    let top = step_tops[t - 2];
    let target = graph.shape(z);
    let top_shape = graph.shape(top);

    let gamma_shape = if arch.gamma_per_channel {
        Shape::new(1, target.channels, 1, 1)?
    } else {
        Shape::new(1, 1, 1, 1)?
    };
    let gamma_shared = arch.time_steps > 2;
    let gf_name = format!("gammaF{l}");
    let gf = match params.id(&gf_name) {
        Some(id) => id,
        None => params.register(&gf_name, Tensor::full(gamma_shape, precision, GAMMA_INIT), gamma_shared)?,
    };
    let gb = if arch.shared_gamma {
        gf
    } else {
        let gb_name = format!("gammaB{l}");
        match params.id(&gb_name) {
            Some(id) => id,
            None => {
                params.register(&gb_name, Tensor::full(gamma_shape, precision, GAMMA_INIT), gamma_shared)?
            }
        }
    };

    // Feedback transform U{l}(t): distinct parameters per (layer, step).
    let u_name = format!("U{l}({t})");
    let ub_name = format!("bU{l}({t})");
    let transformed = if target.height == top_shape.height && target.width == top_shape.width {
        let k = arch.feedback_kernel;
        let spec = ConvSpec {
            in_channels: top_shape.channels,
            out_channels: target.channels,
            kernel: (k, k),
            stride: 1,
            padding: (k - 1) / 2,
            dilation: 1,
        };
        let w = params.register(&u_name, Tensor::zeros(spec.weight_shape(), precision), false)?;
        let b = if arch.bias {
            let shape = Shape::new(1, target.channels, 1, 1)?;
            Some(params.register(&ub_name, Tensor::zeros(shape, precision), false)?)
        } else {
            None
        };
        graph.conv(top, spec, w, b, params)?
    } else {
        if target.height < top_shape.height
            || target.width < top_shape.width
            || target.height % top_shape.height != 0
            || target.width % top_shape.width != 0
            || target.height / top_shape.height != target.width / top_shape.width
        {
            return Err(Error::ArchError(format!(
                "layer {l} output {}x{} has no integer upsampling from top output {}x{}",
                target.height, target.width, top_shape.height, top_shape.width
            )));
        }
        let ratio = target.height / top_shape.height;
        let (k, p) = upsample_kernel(ratio);
        let spec = DeconvSpec {
            in_channels: top_shape.channels,
            out_channels: target.channels,
            kernel: (k, k),
            stride: ratio,
            padding: p,
        };
        let w = params.register(&u_name, Tensor::zeros(spec.weight_shape(), precision), false)?;
        let b = if arch.bias {
            let shape = Shape::new(1, target.channels, 1, 1)?;
            Some(params.register(&ub_name, Tensor::zeros(shape, precision), false)?)
        } else {
            None
        };
        graph.deconv(top, spec, w, b, params)?
    };

    let fwd_norm = graph.l2scale(z, gf, params)?;
    let fb_norm = graph.l2scale(transformed, gb, params)?;
    graph.add(fwd_norm, fb_norm)
}

/// Weighted sum of the per-step top outputs; steps with zero weight are
/// skipped, and a lone unit weight adds no node at all (a one-step model
/// stays node-for-node identical to the plain feedforward network). All
/// outputs must share one shape.
pub fn fuse_outputs(graph: &mut Graph, step_tops: &[NodeId], weights: &[f64]) -> Result<NodeId> {
    if weights.len() != step_tops.len() {
        return Err(Error::InvalidArgument(format!(
            "{} fusion weights for {} steps",
            weights.len(),
            step_tops.len()
        )));
    }
    let active: Vec<(NodeId, f64)> = step_tops
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w != 0.0)
        .map(|(n, w)| (*n, *w))
        .collect();
    if active.is_empty() {
        return Err(Error::InvalidArgument("all fusion weights are zero".into()));
    }
    if active.len() == 1 && active[0].1 == 1.0 {
        return Ok(active[0].0);
    }
    let mut acc: Option<NodeId> = None;
    for (node, w) in active {
        let term = graph.scale(node, w)?;
        acc = Some(match acc {
            Some(prev) => graph.add(prev, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one active term"))
}

/// Transposed-convolution classifier head resizing the fused features to the
/// input resolution over `num_classes` channels, followed by softmax.
/// Errors when the resize factor is not an integer.
pub fn attach_classifier(
    graph: &mut Graph,
    params: &mut ParameterStore,
    fused: NodeId,
    num_classes: usize,
    input_size: (usize, usize),
    bias: bool,
    precision: Precision,
) -> Result<(NodeId, NodeId)> {
    let fs = graph.shape(fused);
    let (in_h, in_w) = input_size;
    if in_h % fs.height != 0 || in_w % fs.width != 0 {
        return Err(Error::ArchError(format!(
            "classifier cannot resize {}x{} to {}x{}: non-integer stride requirement",
            fs.height, fs.width, in_h, in_w
        )));
    }
    let rh = in_h / fs.height;
    let rw = in_w / fs.width;
    if rh != rw {
        return Err(Error::ArchError(format!(
            "classifier resize factors differ per axis ({rh} vs {rw})"
        )));
    }
    let (k, p) = upsample_kernel(rh);
    let spec = DeconvSpec {
        in_channels: fs.channels,
        out_channels: num_classes,
        kernel: (k, k),
        stride: rh,
        padding: p,
    };
    let w = params.register("Wc", Tensor::zeros(spec.weight_shape(), precision), false)?;
    let b = if bias {
        let shape = Shape::new(1, num_classes, 1, 1)?;
        Some(params.register("bc", Tensor::zeros(shape, precision), false)?)
    } else {
        None
    };
    let logits = graph.deconv(fused, spec, w, b, params)?;
    let prediction = graph.softmax(logits)?;
    Ok((logits, prediction))
}

/// Closed-form parameter count for an architecture, without building it.
pub fn parameter_count(arch: &ArchitectureSpec) -> Result<u64> {
    arch.validate()?;
    let mut count: u64 = 0;
    let mut channels = arch.in_channels as u64;
    let mut per_layer_channels = Vec::with_capacity(arch.num_layers());
    for layer in &arch.layers {
        match *layer {
            LayerKind::Conv { out_channels, kernel, .. } => {
                count += out_channels as u64 * channels * (kernel * kernel) as u64;
                if arch.bias {
                    count += out_channels as u64;
                }
                channels = out_channels as u64;
            }
            LayerKind::Deconv { out_channels, kernel, .. } => {
                count += channels * out_channels as u64 * (kernel * kernel) as u64;
                if arch.bias {
                    count += out_channels as u64;
                }
                channels = out_channels as u64;
            }
            LayerKind::Pool { .. } | LayerKind::Relu => {}
        }
        per_layer_channels.push(channels);
    }
    let top_channels = channels;

    if arch.time_steps >= 2 {
        for &l in &arch.recurrent {
            let target_channels = per_layer_channels[l - 1];
            let (num, den) = arch.feedback_ratio(l);
            let ratio = (num / den) as usize;
            let k = if ratio == 1 { arch.feedback_kernel } else { upsample_kernel(ratio).0 };
            let u_size = top_channels * target_channels * (k * k) as u64;
            let u_bias = if arch.bias { target_channels } else { 0 };
            count += (arch.time_steps as u64 - 1) * (u_size + u_bias);
            // Normalization scales, shared across steps.
            let gamma_values = if arch.gamma_per_channel { target_channels } else { 1 };
            let branches = if arch.shared_gamma { 1 } else { 2 };
            count += gamma_values * branches;
        }
    }

    // Classifier: upsampling ratio from the top layer's cumulative scale.
    let (num, den) = arch.scale_at(arch.num_layers());
    if den % num != 0 {
        return Err(Error::ArchError(
            "classifier resize factor is not an integer for this architecture".into(),
        ));
    }
    let ratio = (den / num) as usize;
    let k = upsample_kernel(ratio.max(1)).0;
    count += top_channels * arch.num_classes as u64 * (k * k) as u64;
    if arch.bias {
        count += arch.num_classes as u64;
    }
    Ok(count)
}
