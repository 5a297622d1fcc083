//! Dense rank-4 tensors in row-major (batch, channel, height, width) layout,
//! plus the integer label maps used for per-pixel classification targets.
//!
//! Tensors are immutable values once produced by an operation; every kernel
//! returns a fresh tensor. Storage is always `f64`; a [`Precision`] tag
//! controls whether values are kept at full double precision or rounded to
//! the nearest `f32` after each operation (accumulation still happens in
//! double). Double precision is what the finite-difference gradient checks
//! require; single is the training default.

use crate::error::{Error, Result};

/// Reserved label value excluded from loss and metrics.
pub const VOID_LABEL: u16 = 255;

/// Numeric precision of a tensor's stored values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// Values rounded to `f32` after every operation.
    Single,
    /// Full `f64` values.
    Double,
}

impl Precision {
    fn quantize(self, v: f64) -> f64 {
        match self {
            Precision::Single => v as f32 as f64,
            Precision::Double => v,
        }
    }
}

/// Dimensions of a rank-4 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        if batch == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidSpec(format!(
                "all shape dimensions must be >= 1, got ({batch},{channels},{height},{width})"
            )));
        }
        batch
            .checked_mul(channels)
            .and_then(|n| n.checked_mul(height))
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::InvalidSpec("shape element count overflows".into()))?;
        Ok(Shape { batch, channels, height, width })
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    /// Flat index of `(b, c, h, w)`.
    #[inline(always)]
    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.channels + c) * self.height + h) * self.width + w
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.batch, self.channels, self.height, self.width)
    }
}

/// Dense rank-4 numeric array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    precision: Precision,
    data: Vec<f64>,
}

impl Tensor {
    /// All-zero tensor.
    pub fn zeros(shape: Shape, precision: Precision) -> Tensor {
        Tensor { shape, precision, data: vec![0.0; shape.numel()] }
    }

    /// Tensor filled with `value`.
    pub fn full(shape: Shape, precision: Precision, value: f64) -> Tensor {
        Tensor { shape, precision, data: vec![precision.quantize(value); shape.numel()] }
    }

    /// Builds a tensor from raw row-major values, quantizing if single precision.
    pub fn from_vec(shape: Shape, precision: Precision, mut data: Vec<f64>) -> Result<Tensor> {
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::from_vec".into(),
                lhs: format!("{} values", data.len()),
                rhs: format!("shape {shape}"),
            });
        }
        if precision == Precision::Single {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        Ok(Tensor { shape, precision, data })
    }

    pub fn scalar(precision: Precision, value: f64) -> Tensor {
        let shape = Shape { batch: 1, channels: 1, height: 1, width: 1 };
        Tensor { shape, precision, data: vec![precision.quantize(value)] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Raw mutable access. Callers must preserve the precision invariant;
    /// the parameter store and optimizer go through [`Tensor::quantize_in_place`].
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Re-applies the precision rounding after in-place edits.
    pub fn quantize_in_place(&mut self) {
        if self.precision == Precision::Single {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
    }

    #[inline(always)]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(b, c, h, w)]
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.shape.is_scalar());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_layout(&self, other: &Tensor, context: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context: context.into(),
                lhs: self.shape.to_string(),
                rhs: other.shape.to_string(),
            });
        }
        if self.precision != other.precision {
            return Err(Error::ShapeMismatch {
                context: format!("{context} (precision)"),
                lhs: format!("{:?}", self.precision),
                rhs: format!("{:?}", other.precision),
            });
        }
        Ok(())
    }

    /// Elementwise sum. Shapes and precisions must match.
    pub fn ewise_add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_layout(other, "ewise_add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| self.precision.quantize(a + b))
            .collect();
        Ok(Tensor { shape: self.shape, precision: self.precision, data })
    }

    /// Multiplies every element by `s`.
    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.data.iter().map(|a| self.precision.quantize(a * s)).collect();
        Tensor { shape: self.shape, precision: self.precision, data }
    }

    /// Per (batch, spatial position) L2 norm over the channel axis.
    /// Output shape is `(batch, 1, height, width)`.
    pub fn channel_l2_norms(&self) -> Tensor {
        let s = self.shape;
        let out_shape = Shape { batch: s.batch, channels: 1, height: s.height, width: s.width };
        let mut out = vec![0.0; out_shape.numel()];
        let plane = s.height * s.width;
        for b in 0..s.batch {
            for c in 0..s.channels {
                let base = (b * s.channels + c) * plane;
                for p in 0..plane {
                    let v = self.data[base + p];
                    out[b * plane + p] += v * v;
                }
            }
        }
        for v in &mut out {
            *v = self.precision.quantize(v.sqrt());
        }
        Tensor { shape: out_shape, precision: self.precision, data: out }
    }

    /// Per-position channel argmax, one label map per batch element.
    /// Ties resolve to the lowest channel index.
    pub fn argmax_channels(&self) -> Vec<LabelMap> {
        let s = self.shape;
        let plane = s.height * s.width;
        (0..s.batch)
            .map(|b| {
                let mut labels = vec![0u16; plane];
                for p in 0..plane {
                    let mut best_c = 0usize;
                    let mut best = self.data[(b * s.channels) * plane + p];
                    for c in 1..s.channels {
                        let v = self.data[(b * s.channels + c) * plane + p];
                        if v > best {
                            best = v;
                            best_c = c;
                        }
                    }
                    labels[p] = best_c as u16;
                }
                LabelMap { height: s.height, width: s.width, data: labels }
            })
            .collect()
    }

    /// Mirrors the width axis.
    pub fn hflip(&self) -> Tensor {
        let s = self.shape;
        let mut out = vec![0.0; s.numel()];
        for b in 0..s.batch {
            for c in 0..s.channels {
                for h in 0..s.height {
                    for w in 0..s.width {
                        out[s.index(b, c, h, w)] = self.data[s.index(b, c, h, s.width - 1 - w)];
                    }
                }
            }
        }
        Tensor { shape: s, precision: self.precision, data: out }
    }

    /// Copies the `h × w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape;
        if h == 0 || w == 0 || top + h > s.height || left + w > s.width {
            return Err(Error::InvalidArgument(format!(
                "crop window {h}x{w}@({top},{left}) outside tensor of {}x{}",
                s.height, s.width
            )));
        }
        let out_shape = Shape { batch: s.batch, channels: s.channels, height: h, width: w };
        let mut out = Vec::with_capacity(out_shape.numel());
        for b in 0..s.batch {
            for c in 0..s.channels {
                for row in 0..h {
                    let start = s.index(b, c, top + row, left);
                    out.extend_from_slice(&self.data[start..start + w]);
                }
            }
        }
        Ok(Tensor { shape: out_shape, precision: self.precision, data: out })
    }

    /// Converts values to the other precision (rounding when narrowing).
    pub fn to_precision(&self, precision: Precision) -> Tensor {
        let data = self.data.iter().map(|v| precision.quantize(*v)).collect();
        Tensor { shape: self.shape, precision, data }
    }
}

/// Integer class labels for one image; `VOID_LABEL` marks ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u16>) -> Result<LabelMap> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                context: "LabelMap::new".into(),
                lhs: format!("{} labels", data.len()),
                rhs: format!("{height}x{width}"),
            });
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u16) -> LabelMap {
        LabelMap { height, width, data: vec![value; height * width] }
    }

    #[inline(always)]
    pub fn at(&self, h: usize, w: usize) -> u16 {
        self.data[h * self.width + w]
    }

    #[inline(always)]
    pub fn set(&mut self, h: usize, w: usize, v: u16) {
        self.data[h * self.width + w] = v;
    }

    pub fn hflip(&self) -> LabelMap {
        let mut out = vec![0u16; self.data.len()];
        for h in 0..self.height {
            for w in 0..self.width {
                out[h * self.width + w] = self.at(h, self.width - 1 - w);
            }
        }
        LabelMap { height: self.height, width: self.width, data: out }
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<LabelMap> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop window {h}x{w}@({top},{left}) outside label map of {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Vec::with_capacity(h * w);
        for row in 0..h {
            let start = (top + row) * self.width + left;
            out.extend_from_slice(&self.data[start..start + w]);
        }
        Ok(LabelMap { height: h, width: w, data: out })
    }

    /// Encodes labels as a `(1,1,h,w)` tensor so they can feed a graph input.
    pub fn to_tensor(&self, precision: Precision) -> Tensor {
        let shape = Shape { batch: 1, channels: 1, height: self.height, width: self.width };
        let data = self.data.iter().map(|v| *v as f64).collect();
        Tensor { shape, precision, data }
    }
}
