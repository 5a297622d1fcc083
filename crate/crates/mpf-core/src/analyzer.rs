//! Receptive-field analysis and graph export.
//!
//! Theoretical receptive fields come from exact interval propagation through
//! the unrolled DAG (the union over all paths, so feedback routes through the
//! previous step's top layer are included). Empirical receptive fields are
//! measured as the support of the input gradient of a single unit, which can
//! never exceed the dependency cone, so empirical is always contained in
//! theoretical.

use crate::error::{Error, Result};
use crate::graph::{backward_seeded, forward, Graph, NodeId, Op};
use crate::tensor::Tensor;
use crate::model::UnrolledModel;

/// Gradient magnitudes at or below this count as zero support.
pub const SUPPORT_THRESHOLD: f64 = 1e-12;

/// Inclusive input-space bounding box influencing one unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RfRect {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl RfRect {
    pub fn height(&self) -> usize {
        self.row1 - self.row0 + 1
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0 + 1
    }

    pub fn contains(&self, inner: &RfRect) -> bool {
        self.row0 <= inner.row0
            && self.col0 <= inner.col0
            && self.row1 >= inner.row1
            && self.col1 >= inner.col1
    }
}

impl std::fmt::Display for RfRect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{} [{}..{}, {}..{}]", self.height(), self.width(), self.row0, self.row1, self.col0, self.col1)
    }
}

#[derive(Debug, Clone, Copy)]
struct Interval {
    lo: isize,
    hi: isize,
}

impl Interval {
    fn union(self, other: Interval) -> Interval {
        Interval { lo: self.lo.min(other.lo), hi: self.hi.max(other.hi) }
    }

    fn clip(self, len: usize) -> Option<Interval> {
        let lo = self.lo.max(0);
        let hi = self.hi.min(len as isize - 1);
        if lo > hi {
            None
        } else {
            Some(Interval { lo, hi })
        }
    }
}

fn ceil_div(a: isize, b: isize) -> isize {
    -((-a).div_euclid(b))
}

/// Input interval needed by one output interval, per axis.
fn backproject(
    op: &Op,
    out: Interval,
    in_len: usize,
    kernel_axis: impl Fn(&Op) -> (usize, usize, usize, usize),
) -> Option<Interval> {
    match op {
        Op::Conv { .. } | Op::MaxPool { .. } => {
            let (k, s, p, d) = kernel_axis(op);
            let lo = out.lo * s as isize - p as isize;
            let hi = out.hi * s as isize - p as isize + (d * (k - 1)) as isize;
            Interval { lo, hi }.clip(in_len)
        }
        Op::Deconv { .. } => {
            let (k, s, p, _) = kernel_axis(op);
            let lo = ceil_div(out.lo + p as isize - (k as isize - 1), s as isize);
            let hi = (out.hi + p as isize).div_euclid(s as isize);
            Interval { lo, hi }.clip(in_len)
        }
        _ => Interval { lo: out.lo, hi: out.hi }.clip(in_len),
    }
}

fn axis_params_h(op: &Op) -> (usize, usize, usize, usize) {
    match op {
        Op::Conv { spec, .. } => (spec.kernel.0, spec.stride, spec.padding, spec.dilation),
        Op::Deconv { spec, .. } => (spec.kernel.0, spec.stride, spec.padding, 1),
        Op::MaxPool { window, stride } => (window.0, stride.0, 0, 1),
        _ => (1, 1, 0, 1),
    }
}

fn axis_params_w(op: &Op) -> (usize, usize, usize, usize) {
    match op {
        Op::Conv { spec, .. } => (spec.kernel.1, spec.stride, spec.padding, spec.dilation),
        Op::Deconv { spec, .. } => (spec.kernel.1, spec.stride, spec.padding, 1),
        Op::MaxPool { window, stride } => (window.1, stride.1, 0, 1),
        _ => (1, 1, 0, 1),
    }
}

/// Exact dependency cone of one unit of `node`, traced back to `target`
/// (usually the image input) by interval propagation.
pub fn theoretical_rf_node(
    graph: &Graph,
    node: NodeId,
    target: NodeId,
    unit: (usize, usize),
) -> Result<RfRect> {
    let shape = graph.shape(node);
    if unit.0 >= shape.height || unit.1 >= shape.width {
        return Err(Error::InvalidArgument(format!(
            "unit ({},{}) outside node extent {}x{}",
            unit.0, unit.1, shape.height, shape.width
        )));
    }
    let mut rows: Vec<Option<Interval>> = vec![None; graph.len()];
    let mut cols: Vec<Option<Interval>> = vec![None; graph.len()];
    rows[node.index()] = Some(Interval { lo: unit.0 as isize, hi: unit.0 as isize });
    cols[node.index()] = Some(Interval { lo: unit.1 as isize, hi: unit.1 as isize });

    for idx in (0..=node.index()).rev() {
        let (Some(r), Some(c)) = (rows[idx], cols[idx]) else { continue };
        let n = graph.node(NodeId(idx));
        for &input in &n.inputs {
            let in_shape = graph.shape(input);
            let (pr, pc) = match n.op {
                Op::SumAll | Op::WeightedCrossEntropy { .. } => (
                    Interval { lo: 0, hi: in_shape.height as isize - 1 }.clip(in_shape.height),
                    Interval { lo: 0, hi: in_shape.width as isize - 1 }.clip(in_shape.width),
                ),
                _ => (
                    backproject(&n.op, r, in_shape.height, axis_params_h),
                    backproject(&n.op, c, in_shape.width, axis_params_w),
                ),
            };
            if let (Some(pr), Some(pc)) = (pr, pc) {
                rows[input.index()] =
                    Some(rows[input.index()].map_or(pr, |existing| existing.union(pr)));
                cols[input.index()] =
                    Some(cols[input.index()].map_or(pc, |existing| existing.union(pc)));
            }
        }
    }

    match (rows[target.index()], cols[target.index()]) {
        (Some(r), Some(c)) => Ok(RfRect {
            row0: r.lo as usize,
            row1: r.hi as usize,
            col0: c.lo as usize,
            col1: c.hi as usize,
        }),
        _ => Err(Error::InvalidArgument(
            "the queried unit does not depend on the target node".into(),
        )),
    }
}

/// Theoretical receptive field of the unit at `unit` in layer `layer`
/// (1-based) at step `step` (1-based), traced to the image input.
pub fn theoretical_rf(
    model: &UnrolledModel,
    layer: usize,
    step: usize,
    unit: (usize, usize),
) -> Result<RfRect> {
    let node = model
        .layer_node(layer, step)
        .ok_or_else(|| Error::InvalidArgument(format!("no layer {layer} at step {step}")))?;
    theoretical_rf_node(&model.graph, node, model.input, unit)
}

/// Measured receptive field: bounding box of input pixels whose gradient
/// from one unit (channel 0 unless specified) is nonzero. `None` when the
/// gradient support is empty.
pub fn empirical_rf(
    model: &UnrolledModel,
    image: &Tensor,
    layer: usize,
    step: usize,
    unit: (usize, usize),
    channel: usize,
) -> Result<Option<RfRect>> {
    let node = model
        .layer_node(layer, step)
        .ok_or_else(|| Error::InvalidArgument(format!("no layer {layer} at step {step}")))?;
    let shape = model.graph.shape(node);
    if channel >= shape.channels || unit.0 >= shape.height || unit.1 >= shape.width {
        return Err(Error::InvalidArgument(format!(
            "unit (c{channel},{},{}) outside node extent {}",
            unit.0, unit.1, shape
        )));
    }
    let mut params = model.params.clone();
    let tape = forward(&model.graph, &[("image", image)], &params)?;
    let mut seed = Tensor::zeros(shape, model.graph.precision());
    let idx = shape.index(0, channel, unit.0, unit.1);
    seed.data_mut()[idx] = 1.0;
    let grads = backward_seeded(&model.graph, &tape, node, seed, &mut params)?;
    let Some(g) = grads.grad(model.input) else { return Ok(None) };

    let gs = g.shape();
    let mut rect: Option<RfRect> = None;
    for c in 0..gs.channels {
        for h in 0..gs.height {
            for w in 0..gs.width {
                if g.at(0, c, h, w).abs() > SUPPORT_THRESHOLD {
                    rect = Some(match rect {
                        None => RfRect { row0: h, row1: h, col0: w, col1: w },
                        Some(r) => RfRect {
                            row0: r.row0.min(h),
                            row1: r.row1.max(h),
                            col0: r.col0.min(w),
                            col1: r.col1.max(w),
                        },
                    });
                }
            }
        }
    }
    Ok(rect)
}

/// Center unit of a layer's spatial map.
pub fn center_unit(model: &UnrolledModel, layer: usize, step: usize) -> Result<(usize, usize)> {
    let node = model
        .layer_node(layer, step)
        .ok_or_else(|| Error::InvalidArgument(format!("no layer {layer} at step {step}")))?;
    let s = model.graph.shape(node);
    Ok((s.height / 2, s.width / 2))
}

/// `layer,step,rf_h,rf_w` rows for every layer and step (theoretical, at the
/// center unit).
pub fn rf_csv_theoretical(model: &UnrolledModel) -> Result<String> {
    let mut out = String::from("layer,step,rf_h,rf_w\n");
    for layer in 1..=model.arch.num_layers() {
        for step in 1..=model.num_steps() {
            let rect = theoretical_rf(model, layer, step, center_unit(model, layer, step)?)?;
            out.push_str(&format!("{layer},{step},{},{}\n", rect.height(), rect.width()));
        }
    }
    Ok(out)
}

/// `layer,step,rf_h,rf_w` rows measured on the given image (channel 0 of the
/// center unit); empty support reports 0x0.
pub fn rf_csv_empirical(model: &UnrolledModel, image: &Tensor) -> Result<String> {
    let mut out = String::from("layer,step,rf_h,rf_w\n");
    for layer in 1..=model.arch.num_layers() {
        for step in 1..=model.num_steps() {
            let unit = center_unit(model, layer, step)?;
            let rect = empirical_rf(model, image, layer, step, unit, 0)?;
            let (h, w) = rect.map(|r| (r.height(), r.width())).unwrap_or((0, 0));
            out.push_str(&format!("{layer},{step},{h},{w}\n"));
        }
    }
    Ok(out)
}

fn op_label(graph: &Graph, model: &UnrolledModel, id: NodeId) -> String {
    let node = graph.node(id);
    let p = |pid| {
        let param = model.params.get(pid);
        if param.shared {
            format!("{}[shared]", param.name)
        } else {
            param.name.clone()
        }
    };
    match &node.op {
        Op::Input { name } => format!("input {name}"),
        Op::Conv { spec, weight, bias } => {
            let mut s = format!(
                "conv k{}x{} s{} p{} d{} {}",
                spec.kernel.0, spec.kernel.1, spec.stride, spec.padding, spec.dilation, p(*weight)
            );
            if let Some(b) = bias {
                s.push_str(&format!(" {}", p(*b)));
            }
            s
        }
        Op::Deconv { spec, weight, bias } => {
            let mut s = format!(
                "deconv k{}x{} s{} p{} {}",
                spec.kernel.0, spec.kernel.1, spec.stride, spec.padding, p(*weight)
            );
            if let Some(b) = bias {
                s.push_str(&format!(" {}", p(*b)));
            }
            s
        }
        Op::MaxPool { window, stride } => {
            format!("maxpool {}x{} s{}x{}", window.0, window.1, stride.0, stride.1)
        }
        Op::Relu => "relu".into(),
        Op::L2Scale { gamma } => format!("l2scale {}", p(*gamma)),
        Op::Add => "add".into(),
        Op::Scale { factor } => format!("scale {factor}"),
        Op::Softmax => "softmax".into(),
        Op::SumAll => "sum".into(),
        Op::WeightedCrossEntropy { .. } => "weighted-cross-entropy".into(),
    }
}

/// Deterministic Graphviz DOT listing of the unrolled graph, with shared
/// parameters annotated and layer outputs tagged by (layer, step).
pub fn export_graph(model: &UnrolledModel) -> String {
    let graph = &model.graph;
    // Tag layer outputs, the fused feature node, and the prediction.
    let mut tags: Vec<String> = vec![String::new(); graph.len()];
    for t in 1..=model.num_steps() {
        for l in 1..=model.arch.num_layers() {
            if let Some(id) = model.layer_node(l, t) {
                tags[id.index()] = format!(" X[l{l},t{t}]");
            }
        }
    }
    tags[model.fused.index()].push_str(" O");
    tags[model.prediction.index()].push_str(" prediction");

    let mut out = String::from("digraph unrolled_model {\n  rankdir=TB;\n");
    for (i, node) in graph.nodes().iter().enumerate() {
        let id = NodeId(i);
        out.push_str(&format!(
            "  n{i} [label=\"n{i} {}{} {}\"];\n",
            op_label(graph, model, id),
            tags[i],
            node.shape
        ));
    }
    for (i, node) in graph.nodes().iter().enumerate() {
        for input in &node.inputs {
            out.push_str(&format!("  n{} -> n{i};\n", input.index()));
        }
    }
    out.push_str("}\n");
    out
}
