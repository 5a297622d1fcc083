//! Layer kernels: convolution, transposed convolution, max pooling, ReLU,
//! per-position L2 scale normalization, and channel softmax.
//!
//! Convolution is cross-correlation (no kernel flip). All kernels are pure
//! functions of their inputs and run sequentially, so results are bitwise
//! deterministic. Accumulation happens in double; outputs are quantized by
//! the tensor constructor when the operands are single precision.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Norm threshold below which an L2-scaled channel vector is treated as zero
/// (output and gradient are defined as 0 there).
pub const L2_NORM_GUARD: f64 = 1e-12;

/// Probability floor inside logarithms so finite inputs give finite losses.
pub const PROB_FLOOR: f64 = 1e-300;

/// Convolution layer geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidSpec("conv channels must be >= 1".into()));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::InvalidSpec(
                "conv kernel, stride and dilation must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// `floor((in + 2·pad − dilation·(k−1) − 1)/stride) + 1`, per axis.
    pub fn output_size(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let out = |n: usize, k: usize| -> Result<usize> {
            let span = self.dilation * (k - 1) + 1;
            let padded = n + 2 * self.padding;
            if padded < span {
                return Err(Error::InvalidSpec(format!(
                    "conv output size < 1 (input {n}, kernel {k}, stride {}, pad {}, dilation {})",
                    self.stride, self.padding, self.dilation
                )));
            }
            Ok((padded - span) / self.stride + 1)
        };
        Ok((out(in_h, self.kernel.0)?, out(in_w, self.kernel.1)?))
    }

    /// Weight layout `(out_channels, in_channels, kh, kw)`.
    pub fn weight_shape(&self) -> Shape {
        Shape {
            batch: self.out_channels,
            channels: self.in_channels,
            height: self.kernel.0,
            width: self.kernel.1,
        }
    }
}

/// Transposed-convolution layer geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeconvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
}

impl DeconvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidSpec("deconv channels must be >= 1".into()));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride == 0 {
            return Err(Error::InvalidSpec("deconv kernel and stride must be >= 1".into()));
        }
        Ok(())
    }

    /// `(in − 1)·stride − 2·pad + k`, per axis.
    pub fn output_size(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let out = |n: usize, k: usize| -> Result<usize> {
            let grown = (n - 1) * self.stride + k;
            if grown <= 2 * self.padding {
                return Err(Error::InvalidSpec(format!(
                    "deconv output size < 1 (input {n}, kernel {k}, stride {}, pad {})",
                    self.stride, self.padding
                )));
            }
            Ok(grown - 2 * self.padding)
        };
        Ok((out(in_h, self.kernel.0)?, out(in_w, self.kernel.1)?))
    }

    /// Weight layout `(in_channels, out_channels, kh, kw)`; with tied weights
    /// the deconv forward is the exact adjoint of the matching conv forward.
    pub fn weight_shape(&self) -> Shape {
        Shape {
            batch: self.in_channels,
            channels: self.out_channels,
            height: self.kernel.0,
            width: self.kernel.1,
        }
    }
}

/// Indices `j` in `0..j_len` whose dependent index `j*stride + offset`
/// lands inside `0..dep_len`. Returns an empty range when none do.
#[inline]
fn valid_range(j_len: usize, dep_len: usize, stride: usize, offset: isize) -> std::ops::Range<usize> {
    let lo = if offset < 0 {
        let need = (-offset) as usize;
        need.div_ceil(stride)
    } else {
        0
    };
    let max_dep = dep_len as isize - 1 - offset;
    if max_dep < 0 {
        return 0..0;
    }
    let hi = (max_dep as usize / stride) + 1;
    lo..hi.min(j_len)
}

fn check_channels(context: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::ShapeMismatch {
            context: context.into(),
            lhs: format!("{got} channels"),
            rhs: format!("{want} expected"),
        });
    }
    Ok(())
}

/// Cross-correlation with stride, zero padding and dilation.
pub fn conv2d_forward(x: &Tensor, spec: &ConvSpec, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let xs = x.shape();
    check_channels("conv2d input", xs.channels, spec.in_channels)?;
    if weights.shape() != spec.weight_shape() {
        return Err(Error::ShapeMismatch {
            context: "conv2d weights".into(),
            lhs: weights.shape().to_string(),
            rhs: spec.weight_shape().to_string(),
        });
    }
    let (oh_n, ow_n) = spec.output_size(xs.height, xs.width)?;
    let os = Shape { batch: xs.batch, channels: spec.out_channels, height: oh_n, width: ow_n };
    let mut out = vec![0.0; os.numel()];
    let (kh_n, kw_n) = spec.kernel;
    let (s, p, d) = (spec.stride, spec.padding as isize, spec.dilation as isize);
    let xd = x.data();
    let wd = weights.data();

    for b in 0..xs.batch {
        for oc in 0..spec.out_channels {
            if let Some(bt) = bias {
                let bv = bt.data()[oc];
                let base = os.index(b, oc, 0, 0);
                for v in &mut out[base..base + oh_n * ow_n] {
                    *v = bv;
                }
            }
            for ic in 0..spec.in_channels {
                for kh in 0..kh_n {
                    let off_h = kh as isize * d - p;
                    let oh_range = valid_range(oh_n, xs.height, s, off_h);
                    for kw in 0..kw_n {
                        let wv = wd[spec.weight_shape().index(oc, ic, kh, kw)];
                        if wv == 0.0 {
                            continue;
                        }
                        let off_w = kw as isize * d - p;
                        let ow_range = valid_range(ow_n, xs.width, s, off_w);
                        if ow_range.is_empty() {
                            continue;
                        }
                        for oh in oh_range.clone() {
                            let ih = (oh * s) as isize + off_h;
                            let xrow = xs.index(b, ic, ih as usize, 0);
                            let orow = os.index(b, oc, oh, 0);
                            for ow in ow_range.clone() {
                                let iw = ((ow * s) as isize + off_w) as usize;
                                out[orow + ow] += wv * xd[xrow + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(os, x.precision(), out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weights and bias.
pub fn conv2d_backward(
    x: &Tensor,
    spec: &ConvSpec,
    weights: &Tensor,
    grad_out: &Tensor,
    with_bias: bool,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let xs = x.shape();
    let os = grad_out.shape();
    let ws = spec.weight_shape();
    let (kh_n, kw_n) = spec.kernel;
    let (s, p, d) = (spec.stride, spec.padding as isize, spec.dilation as isize);
    let mut dx = vec![0.0; xs.numel()];
    let mut dw = vec![0.0; ws.numel()];
    let xd = x.data();
    let wd = weights.data();
    let gd = grad_out.data();

    for b in 0..xs.batch {
        for oc in 0..spec.out_channels {
            for ic in 0..spec.in_channels {
                for kh in 0..kh_n {
                    let off_h = kh as isize * d - p;
                    let oh_range = valid_range(os.height, xs.height, s, off_h);
                    for kw in 0..kw_n {
                        let off_w = kw as isize * d - p;
                        let ow_range = valid_range(os.width, xs.width, s, off_w);
                        if ow_range.is_empty() {
                            continue;
                        }
                        let wv = wd[ws.index(oc, ic, kh, kw)];
                        let mut wsum = 0.0;
                        for oh in oh_range.clone() {
                            let ih = ((oh * s) as isize + off_h) as usize;
                            let xrow = xs.index(b, ic, ih, 0);
                            let grow = os.index(b, oc, oh, 0);
                            for ow in ow_range.clone() {
                                let iw = ((ow * s) as isize + off_w) as usize;
                                let g = gd[grow + ow];
                                wsum += g * xd[xrow + iw];
                                dx[xrow + iw] += g * wv;
                            }
                        }
                        dw[ws.index(oc, ic, kh, kw)] += wsum;
                    }
                }
            }
        }
    }

    let db = if with_bias {
        let mut db = vec![0.0; spec.out_channels];
        for b in 0..os.batch {
            for oc in 0..spec.out_channels {
                let base = os.index(b, oc, 0, 0);
                db[oc] += gd[base..base + os.height * os.width].iter().sum::<f64>();
            }
        }
        Some(Tensor::from_vec(
            Shape { batch: 1, channels: spec.out_channels, height: 1, width: 1 },
            x.precision(),
            db,
        )?)
    } else {
        None
    };

    Ok((
        Tensor::from_vec(xs, x.precision(), dx)?,
        Tensor::from_vec(ws, x.precision(), dw)?,
        db,
    ))
}

/// Transposed convolution; the exact adjoint of a matching stride/pad conv.
pub fn deconv2d_forward(x: &Tensor, spec: &DeconvSpec, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let xs = x.shape();
    check_channels("deconv2d input", xs.channels, spec.in_channels)?;
    if weights.shape() != spec.weight_shape() {
        return Err(Error::ShapeMismatch {
            context: "deconv2d weights".into(),
            lhs: weights.shape().to_string(),
            rhs: spec.weight_shape().to_string(),
        });
    }
    let (oh_n, ow_n) = spec.output_size(xs.height, xs.width)?;
    let os = Shape { batch: xs.batch, channels: spec.out_channels, height: oh_n, width: ow_n };
    let ws = spec.weight_shape();
    let (kh_n, kw_n) = spec.kernel;
    let (s, p) = (spec.stride, spec.padding as isize);
    let mut out = vec![0.0; os.numel()];
    let xd = x.data();
    let wd = weights.data();

    for b in 0..xs.batch {
        if let Some(bt) = bias {
            for oc in 0..spec.out_channels {
                let bv = bt.data()[oc];
                let base = os.index(b, oc, 0, 0);
                for v in &mut out[base..base + oh_n * ow_n] {
                    *v = bv;
                }
            }
        }
        for ic in 0..spec.in_channels {
            for oc in 0..spec.out_channels {
                for kh in 0..kh_n {
                    let off_h = kh as isize - p;
                    let ih_range = valid_range(xs.height, oh_n, s, off_h);
                    for kw in 0..kw_n {
                        let wv = wd[ws.index(ic, oc, kh, kw)];
                        if wv == 0.0 {
                            continue;
                        }
                        let off_w = kw as isize - p;
                        let iw_range = valid_range(xs.width, ow_n, s, off_w);
                        if iw_range.is_empty() {
                            continue;
                        }
                        for ih in ih_range.clone() {
                            let oh = ((ih * s) as isize + off_h) as usize;
                            let xrow = xs.index(b, ic, ih, 0);
                            let orow = os.index(b, oc, oh, 0);
                            for iw in iw_range.clone() {
                                let ow = ((iw * s) as isize + off_w) as usize;
                                out[orow + ow] += wv * xd[xrow + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(os, x.precision(), out)
}

/// Gradients of [`deconv2d_forward`].
pub fn deconv2d_backward(
    x: &Tensor,
    spec: &DeconvSpec,
    weights: &Tensor,
    grad_out: &Tensor,
    with_bias: bool,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let xs = x.shape();
    let os = grad_out.shape();
    let ws = spec.weight_shape();
    let (kh_n, kw_n) = spec.kernel;
    let (s, p) = (spec.stride, spec.padding as isize);
    let mut dx = vec![0.0; xs.numel()];
    let mut dw = vec![0.0; ws.numel()];
    let xd = x.data();
    let wd = weights.data();
    let gd = grad_out.data();

    for b in 0..xs.batch {
        for ic in 0..spec.in_channels {
            for oc in 0..spec.out_channels {
                for kh in 0..kh_n {
                    let off_h = kh as isize - p;
                    let ih_range = valid_range(xs.height, os.height, s, off_h);
                    for kw in 0..kw_n {
                        let off_w = kw as isize - p;
                        let iw_range = valid_range(xs.width, os.width, s, off_w);
                        if iw_range.is_empty() {
                            continue;
                        }
                        let wv = wd[ws.index(ic, oc, kh, kw)];
                        let mut wsum = 0.0;
                        for ih in ih_range.clone() {
                            let oh = ((ih * s) as isize + off_h) as usize;
                            let xrow = xs.index(b, ic, ih, 0);
                            let grow = os.index(b, oc, oh, 0);
                            for iw in iw_range.clone() {
                                let ow = ((iw * s) as isize + off_w) as usize;
                                let g = gd[grow + ow];
                                wsum += g * xd[xrow + iw];
                                dx[xrow + iw] += g * wv;
                            }
                        }
                        dw[ws.index(ic, oc, kh, kw)] += wsum;
                    }
                }
            }
        }
    }

    let db = if with_bias {
        let mut db = vec![0.0; spec.out_channels];
        for b in 0..os.batch {
            for oc in 0..spec.out_channels {
                let base = os.index(b, oc, 0, 0);
                db[oc] += gd[base..base + os.height * os.width].iter().sum::<f64>();
            }
        }
        Some(Tensor::from_vec(
            Shape { batch: 1, channels: spec.out_channels, height: 1, width: 1 },
            x.precision(),
            db,
        )?)
    } else {
        None
    };

    Ok((
        Tensor::from_vec(xs, x.precision(), dx)?,
        Tensor::from_vec(ws, x.precision(), dw)?,
        db,
    ))
}

fn pool_output_size(n: usize, k: usize, s: usize) -> Result<usize> {
    if k == 0 || s == 0 {
        return Err(Error::InvalidSpec("pool window and stride must be >= 1".into()));
    }
    if n < k {
        return Err(Error::InvalidSpec(format!("pool window {k} larger than input {n}")));
    }
    Ok((n - k) / s + 1)
}

/// Max pooling with window `(kh, kw)` and stride `(sh, sw)`, no padding.
pub fn maxpool_forward(x: &Tensor, window: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
    let xs = x.shape();
    let oh_n = pool_output_size(xs.height, window.0, stride.0)?;
    let ow_n = pool_output_size(xs.width, window.1, stride.1)?;
    let os = Shape { batch: xs.batch, channels: xs.channels, height: oh_n, width: ow_n };
    let mut out = vec![0.0; os.numel()];
    let xd = x.data();
    for b in 0..xs.batch {
        for c in 0..xs.channels {
            for oh in 0..oh_n {
                for ow in 0..ow_n {
                    let mut best = f64::NEG_INFINITY;
                    for kh in 0..window.0 {
                        let row = xs.index(b, c, oh * stride.0 + kh, ow * stride.1);
                        for kw in 0..window.1 {
                            let v = xd[row + kw];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[os.index(b, c, oh, ow)] = best;
                }
            }
        }
    }
    Tensor::from_vec(os, x.precision(), out)
}

/// Routes the output gradient to each window's first maximum in scan order.
pub fn maxpool_backward(
    x: &Tensor,
    window: (usize, usize),
    stride: (usize, usize),
    grad_out: &Tensor,
) -> Result<Tensor> {
    let xs = x.shape();
    let os = grad_out.shape();
    let mut dx = vec![0.0; xs.numel()];
    let xd = x.data();
    let gd = grad_out.data();
    for b in 0..xs.batch {
        for c in 0..xs.channels {
            for oh in 0..os.height {
                for ow in 0..os.width {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for kh in 0..window.0 {
                        let row = xs.index(b, c, oh * stride.0 + kh, ow * stride.1);
                        for kw in 0..window.1 {
                            let v = xd[row + kw];
                            if v > best {
                                best = v;
                                best_idx = row + kw;
                            }
                        }
                    }
                    dx[best_idx] += gd[os.index(b, c, oh, ow)];
                }
            }
        }
    }
    Tensor::from_vec(xs, x.precision(), dx)
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::from_vec(x.shape(), x.precision(), data).expect("same shape")
}

/// Gradient mask follows the sign of the forward input; exactly-zero inputs
/// get zero gradient.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), x.precision(), data).expect("same shape")
}

fn gamma_at(gamma: &Tensor, c: usize) -> f64 {
    if gamma.shape().channels == 1 {
        gamma.data()[0]
    } else {
        gamma.data()[c]
    }
}

/// Scales each per-position channel vector to norm `|gamma|`. `gamma` is
/// either a single scalar `(1,1,1,1)` or one value per channel `(1,C,1,1)`.
/// Channel vectors with norm below [`L2_NORM_GUARD`] map to zero.
pub fn l2scale_forward(x: &Tensor, gamma: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let gc = gamma.shape().channels;
    if gc != 1 && gc != xs.channels {
        return Err(Error::ShapeMismatch {
            context: "l2scale gamma".into(),
            lhs: format!("{gc} gamma values"),
            rhs: format!("1 or {} expected", xs.channels),
        });
    }
    let plane = xs.height * xs.width;
    let mut out = vec![0.0; xs.numel()];
    let xd = x.data();
    for b in 0..xs.batch {
        for p in 0..plane {
            let mut sq = 0.0;
            for c in 0..xs.channels {
                let v = xd[(b * xs.channels + c) * plane + p];
                sq += v * v;
            }
            let n = sq.sqrt();
            if n <= L2_NORM_GUARD {
                continue;
            }
            for c in 0..xs.channels {
                let i = (b * xs.channels + c) * plane + p;
                out[i] = gamma_at(gamma, c) * xd[i] / n;
            }
        }
    }
    Tensor::from_vec(xs, x.precision(), out)
}

/// Gradients of [`l2scale_forward`] with respect to the input and gamma.
/// The gamma gradient has the same shape as `gamma`.
pub fn l2scale_backward(x: &Tensor, gamma: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let xs = x.shape();
    let plane = xs.height * xs.width;
    let mut dx = vec![0.0; xs.numel()];
    let mut dgamma = vec![0.0; gamma.shape().numel()];
    let per_channel = gamma.shape().channels != 1;
    let xd = x.data();
    let gd = grad_out.data();
    for b in 0..xs.batch {
        for p in 0..plane {
            let mut sq = 0.0;
            for c in 0..xs.channels {
                let v = xd[(b * xs.channels + c) * plane + p];
                sq += v * v;
            }
            let n = sq.sqrt();
            if n <= L2_NORM_GUARD {
                continue;
            }
            // s = sum_k gamma_k * dout_k * x_k
            let mut s = 0.0;
            for c in 0..xs.channels {
                let i = (b * xs.channels + c) * plane + p;
                s += gamma_at(gamma, c) * gd[i] * xd[i];
            }
            for c in 0..xs.channels {
                let i = (b * xs.channels + c) * plane + p;
                dx[i] = gamma_at(gamma, c) * gd[i] / n - xd[i] * s / (n * n * n);
                let dg = gd[i] * xd[i] / n;
                if per_channel {
                    dgamma[c] += dg;
                } else {
                    dgamma[0] += dg;
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(xs, x.precision(), dx)?,
        Tensor::from_vec(gamma.shape(), x.precision(), dgamma)?,
    ))
}

/// Per-position softmax over the channel axis with max subtraction.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let xs = x.shape();
    let plane = xs.height * xs.width;
    let mut out = vec![0.0; xs.numel()];
    let xd = x.data();
    for b in 0..xs.batch {
        for p in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for c in 0..xs.channels {
                m = m.max(xd[(b * xs.channels + c) * plane + p]);
            }
            let mut denom = 0.0;
            for c in 0..xs.channels {
                let i = (b * xs.channels + c) * plane + p;
                let e = (xd[i] - m).exp();
                out[i] = e;
                denom += e;
            }
            for c in 0..xs.channels {
                out[(b * xs.channels + c) * plane + p] /= denom;
            }
        }
    }
    Tensor::from_vec(xs, x.precision(), out).expect("same shape")
}

/// Gradient of [`softmax_channels`] given the forward output `probs`.
pub fn softmax_channels_backward(probs: &Tensor, grad_out: &Tensor) -> Tensor {
    let xs = probs.shape();
    let plane = xs.height * xs.width;
    let mut dx = vec![0.0; xs.numel()];
    let pd = probs.data();
    let gd = grad_out.data();
    for b in 0..xs.batch {
        for p in 0..plane {
            let mut dot = 0.0;
            for c in 0..xs.channels {
                let i = (b * xs.channels + c) * plane + p;
                dot += gd[i] * pd[i];
            }
            for c in 0..xs.channels {
                let i = (b * xs.channels + c) * plane + p;
                dx[i] = pd[i] * (gd[i] - dot);
            }
        }
    }
    Tensor::from_vec(xs, probs.precision(), dx).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    fn t(b: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(Shape::new(b, c, h, w).unwrap(), Precision::Double, data).unwrap()
    }

    #[test]
    fn conv_one_by_one_identity() {
        let spec = ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel: (1, 1),
            stride: 1,
            padding: 0,
            dilation: 1,
        };
        let x = t(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let w = t(1, 1, 1, 1, vec![1.0]);
        let y = conv2d_forward(&x, &spec, &w, None).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_all_ones_interior() {
        let spec = ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel: (3, 3),
            stride: 1,
            padding: 0,
            dilation: 1,
        };
        let x = Tensor::full(Shape::new(1, 1, 5, 5).unwrap(), Precision::Double, 1.0);
        let w = Tensor::full(spec.weight_shape(), Precision::Double, 1.0);
        let y = conv2d_forward(&x, &spec, &w, None).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 3, 3).unwrap());
        assert!(y.data().iter().all(|v| *v == 9.0));
    }

    #[test]
    fn conv_output_size_formula() {
        let spec = ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel: (3, 3),
            stride: 2,
            padding: 1,
            dilation: 2,
        };
        // (9 + 2 - 2*2 - 1)/2 + 1 = 4
        assert_eq!(spec.output_size(9, 9).unwrap(), (4, 4));
        let bad = ConvSpec { kernel: (7, 7), ..spec };
        assert!(bad.output_size(4, 4).is_err());
    }

    #[test]
    fn deconv_identity_and_upsample_size() {
        let spec = DeconvSpec { in_channels: 1, out_channels: 1, kernel: (1, 1), stride: 1, padding: 0 };
        let x = t(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let w = t(1, 1, 1, 1, vec![1.0]);
        assert_eq!(deconv2d_forward(&x, &spec, &w, None).unwrap().data(), x.data());

        let up = DeconvSpec { in_channels: 1, out_channels: 1, kernel: (4, 4), stride: 2, padding: 1 };
        // (2-1)*2 - 2 + 4 = 4
        assert_eq!(up.output_size(2, 2).unwrap(), (4, 4));
    }

    #[test]
    fn maxpool_known_maxima() {
        let x = t(
            1,
            1,
            4,
            4,
            vec![
                1.0, 2.0, 5.0, 4.0, //
                3.0, 0.0, 1.0, 1.0, //
                0.0, 1.0, 2.0, 2.0, //
                9.0, 1.0, 0.0, 3.0,
            ],
        );
        let y = maxpool_forward(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0, 9.0, 3.0]);

        // 1x1 window is the identity.
        let id = maxpool_forward(&x, (1, 1), (1, 1)).unwrap();
        assert_eq!(id.data(), x.data());
    }

    #[test]
    fn maxpool_backward_routes_to_winner() {
        // Tie in the first window: gradient goes to the first max in scan order.
        let x = t(1, 1, 2, 2, vec![7.0, 7.0, 1.0, 0.0]);
        let g = t(1, 1, 1, 1, vec![2.5]);
        let dx = maxpool_backward(&x, (2, 2), (2, 2), &g).unwrap();
        assert_eq!(dx.data(), &[2.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_masks() {
        let x = t(1, 1, 1, 4, vec![-1.0, 0.0, 2.0, -3.0]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0, 0.0]);
        let g = t(1, 1, 1, 4, vec![1.0, 1.0, 1.0, 1.0]);
        assert_eq!(relu_backward(&x, &g).data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn l2scale_three_four_five() {
        let x = t(1, 2, 1, 1, vec![3.0, 4.0]);
        let gamma = Tensor::scalar(Precision::Double, 10.0);
        let y = l2scale_forward(&x, &gamma).unwrap();
        assert!((y.data()[0] - 6.0).abs() < 1e-12);
        assert!((y.data()[1] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn l2scale_unit_norm_gamma_one() {
        let x = t(1, 2, 1, 1, vec![0.6, 0.8]);
        let gamma = Tensor::scalar(Precision::Double, 1.0);
        let y = l2scale_forward(&x, &gamma).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-12);
        assert!((y.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn l2scale_zero_vector_maps_to_zero() {
        let x = t(1, 2, 1, 2, vec![0.0, 3.0, 0.0, 4.0]);
        let gamma = Tensor::scalar(Precision::Double, 10.0);
        let y = l2scale_forward(&x, &gamma).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[2], 0.0);
        let g = Tensor::full(x.shape(), Precision::Double, 1.0);
        let (dx, _) = l2scale_backward(&x, &gamma, &g).unwrap();
        assert_eq!(dx.data()[0], 0.0);
        assert_eq!(dx.data()[2], 0.0);
    }

    #[test]
    fn softmax_closed_forms() {
        let x = t(1, 2, 1, 1, vec![1.0, 1.0]);
        let p = softmax_channels(&x);
        assert!((p.data()[0] - 0.5).abs() < 1e-15);

        let x = t(1, 2, 1, 1, vec![0.0, 3.0f64.ln()]);
        let p = softmax_channels(&x);
        assert!((p.data()[0] - 0.25).abs() < 1e-12);
        assert!((p.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn valid_range_edges() {
        // offset negative: first valid j is ceil(2/1)=2
        assert_eq!(valid_range(5, 10, 1, -2), 2..5);
        // dependent index exceeds range
        assert_eq!(valid_range(5, 3, 1, 0), 0..3);
        // stride 2 with positive offset
        assert_eq!(valid_range(5, 6, 2, 1), 0..3);
        // nothing valid
        assert_eq!(valid_range(5, 2, 1, 4), 0..0);
    }
}
