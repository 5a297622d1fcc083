//! Shared test oracles: deliberately naive reimplementations used to check
//! the optimized kernels and the unroller from an independent direction.

#![allow(dead_code)]

use mpf_core::arch::{ArchitectureSpec, LayerKind};
use mpf_core::error::Result;
use mpf_core::graph::{Graph, NodeId};
use mpf_core::layers::{ConvSpec, DeconvSpec};
use mpf_core::params::ParameterStore;
use mpf_core::tensor::{Precision, Shape, Tensor};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape, precision: Precision, scale: f64) -> Tensor {
    let data = (0..shape.numel()).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(shape, precision, data).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Element-at-a-time convolution with explicit bounds checks. Slow and
/// obviously correct.
pub fn naive_conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Tensor {
    let xs = x.shape();
    let ws = w.shape(); // (out, in, kh, kw)
    let oh_n = (xs.height + 2 * padding - dilation * (ws.height - 1) - 1) / stride + 1;
    let ow_n = (xs.width + 2 * padding - dilation * (ws.width - 1) - 1) / stride + 1;
    let os = Shape::new(xs.batch, ws.batch, oh_n, ow_n).unwrap();
    let mut out = vec![0.0; os.numel()];
    for b in 0..xs.batch {
        for oc in 0..ws.batch {
            for oh in 0..oh_n {
                for ow in 0..ow_n {
                    let mut acc = bias.map(|t| t.data()[oc]).unwrap_or(0.0);
                    for ic in 0..ws.channels {
                        for kh in 0..ws.height {
                            for kw in 0..ws.width {
                                let ih = oh as isize * stride as isize + kh as isize * dilation as isize
                                    - padding as isize;
                                let iw = ow as isize * stride as isize + kw as isize * dilation as isize
                                    - padding as isize;
                                if ih < 0
                                    || iw < 0
                                    || ih >= xs.height as isize
                                    || iw >= xs.width as isize
                                {
                                    continue;
                                }
                                acc += x.at(b, ic, ih as usize, iw as usize)
                                    * w.at(oc, ic, kh, kw);
                            }
                        }
                    }
                    out[os.index(b, oc, oh, ow)] = acc;
                }
            }
        }
    }
    Tensor::from_vec(os, x.precision(), out).unwrap()
}

/// Per-output gather form of the transposed convolution: an output pixel
/// collects every input pixel whose kernel footprint covers it.
pub fn naive_deconv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Tensor {
    let xs = x.shape();
    let ws = w.shape(); // (in, out, kh, kw)
    let oh_n = (xs.height - 1) * stride + ws.height - 2 * padding;
    let ow_n = (xs.width - 1) * stride + ws.width - 2 * padding;
    let os = Shape::new(xs.batch, ws.channels, oh_n, ow_n).unwrap();
    let mut out = vec![0.0; os.numel()];
    for b in 0..xs.batch {
        for oc in 0..ws.channels {
            for oh in 0..oh_n {
                for ow in 0..ow_n {
                    let mut acc = bias.map(|t| t.data()[oc]).unwrap_or(0.0);
                    for ic in 0..ws.batch {
                        for kh in 0..ws.height {
                            let num_h = oh as isize + padding as isize - kh as isize;
                            if num_h < 0 || num_h % stride as isize != 0 {
                                continue;
                            }
                            let ih = (num_h / stride as isize) as usize;
                            if ih >= xs.height {
                                continue;
                            }
                            for kw in 0..ws.width {
                                let num_w = ow as isize + padding as isize - kw as isize;
                                if num_w < 0 || num_w % stride as isize != 0 {
                                    continue;
                                }
                                let iw = (num_w / stride as isize) as usize;
                                if iw >= xs.width {
                                    continue;
                                }
                                acc += x.at(b, ic, ih, iw) * w.at(ic, oc, kh, kw);
                            }
                        }
                    }
                    out[os.index(b, oc, oh, ow)] = acc;
                }
            }
        }
    }
    Tensor::from_vec(os, x.precision(), out).unwrap()
}

pub fn naive_maxpool(x: &Tensor, window: (usize, usize), stride: (usize, usize)) -> Tensor {
    let xs = x.shape();
    let oh_n = (xs.height - window.0) / stride.0 + 1;
    let ow_n = (xs.width - window.1) / stride.1 + 1;
    let os = Shape::new(xs.batch, xs.channels, oh_n, ow_n).unwrap();
    let mut out = vec![0.0; os.numel()];
    for b in 0..xs.batch {
        for c in 0..xs.channels {
            for oh in 0..oh_n {
                for ow in 0..ow_n {
                    let mut best = f64::NEG_INFINITY;
                    for kh in 0..window.0 {
                        for kw in 0..window.1 {
                            best = best.max(x.at(b, c, oh * stride.0 + kh, ow * stride.1 + kw));
                        }
                    }
                    out[os.index(b, c, oh, ow)] = best;
                }
            }
        }
    }
    Tensor::from_vec(os, x.precision(), out).unwrap()
}

fn upsample_kernel(ratio: usize) -> (usize, usize) {
    if ratio % 2 == 0 {
        (2 * ratio, ratio / 2)
    } else {
        (2 * ratio - 1, (ratio - 1) / 2)
    }
}

/// Independent construction of the plain (one-pass) feedforward network with
/// the deconvolution classifier, registering parameters under the same names
/// the unroller uses so values can be copied across.
pub fn build_plain_feedforward(
    arch: &ArchitectureSpec,
    input_size: (usize, usize),
    precision: Precision,
) -> Result<(Graph, ParameterStore, NodeId)> {
    let mut graph = Graph::new(precision);
    let mut params = ParameterStore::new();
    let mut current = graph.input("image", Shape::new(1, arch.in_channels, input_size.0, input_size.1)?);
    let mut channels = arch.in_channels;
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
                let w = params.register(
                    &format!("W{l}"),
                    Tensor::zeros(spec.weight_shape(), precision),
                    false,
                )?;
                let b = if arch.bias {
                    Some(params.register(
                        &format!("b{l}"),
                        Tensor::zeros(Shape::new(1, out_channels, 1, 1)?, precision),
                        false,
                    )?)
                } else {
                    None
                };
                channels = out_channels;
                graph.conv(current, spec, w, b, &params)?
            }
            LayerKind::Deconv { out_channels, kernel, stride, padding } => {
                let spec = DeconvSpec {
                    in_channels: channels,
                    out_channels,
                    kernel: (kernel, kernel),
                    stride,
                    padding,
                };
                let w = params.register(
                    &format!("W{l}"),
                    Tensor::zeros(spec.weight_shape(), precision),
                    false,
                )?;
                let b = if arch.bias {
                    Some(params.register(
                        &format!("b{l}"),
                        Tensor::zeros(Shape::new(1, out_channels, 1, 1)?, precision),
                        false,
                    )?)
                } else {
                    None
                };
                channels = out_channels;
                graph.deconv(current, spec, w, b, &params)?
            }
            LayerKind::Pool { kernel, stride } => {
                graph.maxpool(current, (kernel, kernel), (stride, stride))?
            }
            LayerKind::Relu => graph.relu(current)?,
        };
    }

    let top_shape = graph.shape(current);
    let ratio = input_size.0 / top_shape.height;
    let (k, p) = upsample_kernel(ratio);
    let spec = DeconvSpec {
        in_channels: top_shape.channels,
        out_channels: arch.num_classes,
        kernel: (k, k),
        stride: ratio,
        padding: p,
    };
    let w = params.register("Wc", Tensor::zeros(spec.weight_shape(), precision), false)?;
    let b = if arch.bias {
        Some(params.register(
            "bc",
            Tensor::zeros(Shape::new(1, arch.num_classes, 1, 1)?, precision),
            false,
        )?)
    } else {
        None
    };
    let logits = graph.deconv(current, spec, w, b, &params)?;
    let prediction = graph.softmax(logits)?;
    Ok((graph, params, prediction))
}

/// Copies values for every parameter of `dst` from `src`, stripping the
/// `@t{n}` suffix unshared-copy models append to trunk weight names.
pub fn copy_params_by_base_name(src: &ParameterStore, dst: &mut ParameterStore) {
    let targets: Vec<_> = dst.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in targets {
        let base = name.split('@').next().unwrap();
        let sid = src
            .id(base)
            .unwrap_or_else(|| panic!("source store lacks parameter '{base}'"));
        dst.set_value(id, src.value(sid).clone()).unwrap();
    }
}
