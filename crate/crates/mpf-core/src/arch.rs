//! The line-oriented architecture description format.
//!
//! One layer per line, in order, `#` starts a comment:
//!
//! ```text
//! # directives (any position, conventionally at the top)
//! classes = 8          # number of output classes, required
//! steps = 3            # unrolled time steps T, default 1
//! lambda = 0.3,0.3,1.0 # fusion weights, one per step; required when steps > 1
//! recurrent = 3,6      # 1-based indices of layers receiving top-layer feedback
//! in_channels = 3      # input image channels, default 3
//! bias = true          # bias terms on weighted layers and feedback transforms
//! shared_gamma = false # one normalization scale per merge instead of two
//! gamma_per_channel = false # per-channel normalization scales
//! feedback_kernel = 1  # odd kernel size for equal-size feedback transforms
//!
//! # layers (1-based indices)
//! conv out=8 k=3 s=1 p=1 d=1   # s,p,d optional (defaults 1,0,1)
//! relu
//! pool k=2 s=2                 # s defaults to k
//! deconv out=8 k=4 s=2 p=1     # s,p optional (defaults 1,0)
//! ```

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv { out_channels: usize, kernel: usize, stride: usize, padding: usize, dilation: usize },
    Deconv { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Pool { kernel: usize, stride: usize },
    Relu,
}

impl LayerKind {
    /// Weighted layers are valid feedback targets; the merge lands on their
    /// linear output.
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Deconv { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Deconv { .. } => "deconv",
            LayerKind::Pool { .. } => "pool",
            LayerKind::Relu => "relu",
        }
    }
}

/// Parsed architecture: ordered layers plus the recurrence/fusion directives.
#[derive(Debug, Clone)]
pub struct ArchitectureSpec {
    /// Original text, preserved verbatim for checkpoints.
    pub source: String,
    pub layers: Vec<LayerKind>,
    /// 1-based indices of layers receiving feedback, ascending.
    pub recurrent: Vec<usize>,
    pub time_steps: usize,
    pub fusion_weights: Vec<f64>,
    pub num_classes: usize,
    pub in_channels: usize,
    pub bias: bool,
    pub shared_gamma: bool,
    pub gamma_per_channel: bool,
    pub feedback_kernel: usize,
}

fn parse_usize(raw: &str, what: &str, line_no: usize) -> Result<usize> {
    raw.trim()
        .parse::<usize>()
        .map_err(|_| Error::ArchError(format!("line {line_no}: bad {what} '{raw}'")))
}

fn parse_bool(raw: &str, what: &str, line_no: usize) -> Result<bool> {
    match raw.trim() {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        other => Err(Error::ArchError(format!("line {line_no}: bad {what} '{other}'"))),
    }
}

fn parse_attrs(parts: &[&str], allowed: &[&str], line_no: usize) -> Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    for part in parts {
        let (key, value) = part.split_once('=').ok_or_else(|| {
            Error::ArchError(format!("line {line_no}: expected key=value, got '{part}'"))
        })?;
        if !allowed.contains(&key) {
            return Err(Error::ArchError(format!(
                "line {line_no}: unknown attribute '{key}' (allowed: {})",
                allowed.join(", ")
            )));
        }
        if out.iter().any(|(k, _)| k == key) {
            return Err(Error::ArchError(format!("line {line_no}: duplicate attribute '{key}'")));
        }
        out.push((key.to_string(), parse_usize(value, key, line_no)?));
    }
    Ok(out)
}

fn attr(attrs: &[(String, usize)], key: &str) -> Option<usize> {
    attrs.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
}

impl ArchitectureSpec {
    pub fn parse(text: &str) -> Result<ArchitectureSpec> {
        let mut layers = Vec::new();
        let mut recurrent: Option<Vec<usize>> = None;
        let mut time_steps: Option<usize> = None;
        let mut fusion_weights: Option<Vec<f64>> = None;
        let mut num_classes: Option<usize> = None;
        let mut in_channels: Option<usize> = None;
        let mut bias: Option<bool> = None;
        let mut shared_gamma: Option<bool> = None;
        let mut gamma_per_channel: Option<bool> = None;
        let mut feedback_kernel: Option<usize> = None;

        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw_line.split_once('#') {
                Some((head, _)) => head.trim(),
                None => raw_line.trim(),
            };
            if line.is_empty() {
                continue;
            }

            if let Some((key, value)) = line.split_once('=') {
                // A directive, unless the '=' belongs to a layer attribute.
                let key_token = key.trim();
                if !key_token.contains(' ') {
                    let value = value.trim();
                    match key_token {
                        "recurrent" => {
                            let mut set = Vec::new();
                            for item in value.split(',') {
                                let item = item.trim();
                                if item.is_empty() {
                                    continue;
                                }
                                set.push(parse_usize(item, "recurrent index", line_no)?);
                            }
                            replace_once(&mut recurrent, set, "recurrent", line_no)?;
                        }
                        "steps" => {
                            let v = parse_usize(value, "steps", line_no)?;
                            replace_once(&mut time_steps, v, "steps", line_no)?;
                        }
                        "lambda" => {
                            let mut weights = Vec::new();
                            for item in value.split(',') {
                                let item = item.trim();
                                weights.push(item.parse::<f64>().map_err(|_| {
                                    Error::ArchError(format!(
                                        "line {line_no}: bad lambda value '{item}'"
                                    ))
                                })?);
                            }
                            replace_once(&mut fusion_weights, weights, "lambda", line_no)?;
                        }
                        "classes" => {
                            let v = parse_usize(value, "classes", line_no)?;
                            replace_once(&mut num_classes, v, "classes", line_no)?;
                        }
                        "in_channels" => {
                            let v = parse_usize(value, "in_channels", line_no)?;
                            replace_once(&mut in_channels, v, "in_channels", line_no)?;
                        }
                        "bias" => {
                            let v = parse_bool(value, "bias", line_no)?;
                            replace_once(&mut bias, v, "bias", line_no)?;
                        }
                        "shared_gamma" => {
                            let v = parse_bool(value, "shared_gamma", line_no)?;
                            replace_once(&mut shared_gamma, v, "shared_gamma", line_no)?;
                        }
                        "gamma_per_channel" => {
                            let v = parse_bool(value, "gamma_per_channel", line_no)?;
                            replace_once(&mut gamma_per_channel, v, "gamma_per_channel", line_no)?;
                        }
                        "feedback_kernel" => {
                            let v = parse_usize(value, "feedback_kernel", line_no)?;
                            replace_once(&mut feedback_kernel, v, "feedback_kernel", line_no)?;
                        }
                        other => {
                            return Err(Error::ArchError(format!(
                                "line {line_no}: unknown directive '{other}'"
                            )));
                        }
                    }
                    continue;
                }
            }

            // A layer line.
            let mut parts = line.split_whitespace();
            let kind = parts.next().expect("nonempty line");
            let rest: Vec<&str> = parts.collect();
            let layer = match kind {
                "conv" => {
                    let attrs = parse_attrs(&rest, &["out", "k", "s", "p", "d"], line_no)?;
                    LayerKind::Conv {
                        out_channels: attr(&attrs, "out").ok_or_else(|| {
                            Error::ArchError(format!("line {line_no}: conv needs out="))
                        })?,
                        kernel: attr(&attrs, "k").ok_or_else(|| {
                            Error::ArchError(format!("line {line_no}: conv needs k="))
                        })?,
                        stride: attr(&attrs, "s").unwrap_or(1),
                        padding: attr(&attrs, "p").unwrap_or(0),
                        dilation: attr(&attrs, "d").unwrap_or(1),
                    }
                }
                "deconv" => {
                    let attrs = parse_attrs(&rest, &["out", "k", "s", "p"], line_no)?;
                    LayerKind::Deconv {
                        out_channels: attr(&attrs, "out").ok_or_else(|| {
                            Error::ArchError(format!("line {line_no}: deconv needs out="))
                        })?,
                        kernel: attr(&attrs, "k").ok_or_else(|| {
                            Error::ArchError(format!("line {line_no}: deconv needs k="))
                        })?,
                        stride: attr(&attrs, "s").unwrap_or(1),
                        padding: attr(&attrs, "p").unwrap_or(0),
                    }
                }
                "pool" => {
                    let attrs = parse_attrs(&rest, &["k", "s"], line_no)?;
                    let kernel = attr(&attrs, "k").ok_or_else(|| {
                        Error::ArchError(format!("line {line_no}: pool needs k="))
                    })?;
                    LayerKind::Pool { kernel, stride: attr(&attrs, "s").unwrap_or(kernel) }
                }
                "relu" => {
                    if !rest.is_empty() {
                        return Err(Error::ArchError(format!(
                            "line {line_no}: relu takes no attributes"
                        )));
                    }
                    LayerKind::Relu
                }
                other => {
                    return Err(Error::ArchError(format!(
                        "line {line_no}: unknown layer kind '{other}'"
                    )));
                }
            };
            layers.push(layer);
        }

        let time_steps = time_steps.unwrap_or(1);
        let fusion_weights = match fusion_weights {
            Some(w) => w,
            None if time_steps == 1 => vec![1.0],
            None => {
                return Err(Error::ArchError(
                    "lambda must be given when steps > 1".into(),
                ));
            }
        };
        let mut recurrent = recurrent.unwrap_or_default();
        recurrent.sort_unstable();

        let spec = ArchitectureSpec {
            source: text.to_string(),
            layers,
            recurrent,
            time_steps,
            fusion_weights,
            num_classes: num_classes
                .ok_or_else(|| Error::ArchError("missing required directive 'classes'".into()))?,
            in_channels: in_channels.unwrap_or(3),
            bias: bias.unwrap_or(true),
            shared_gamma: shared_gamma.unwrap_or(false),
            gamma_per_channel: gamma_per_channel.unwrap_or(false),
            feedback_kernel: feedback_kernel.unwrap_or(1),
        };
        Ok(spec)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Spatial scale of layer `l` (1-based; 0 = input) relative to the input,
    /// as a rational `(num, den)`: size ~= input * num / den.
    pub fn scale_at(&self, l: usize) -> (u64, u64) {
        let mut num = 1u64;
        let mut den = 1u64;
        for layer in &self.layers[..l] {
            match layer {
                LayerKind::Conv { stride, .. } | LayerKind::Pool { stride, .. } => {
                    den *= *stride as u64;
                }
                LayerKind::Deconv { stride, .. } => {
                    num *= *stride as u64;
                }
                LayerKind::Relu => {}
            }
        }
        let g = gcd(num, den);
        (num / g, den / g)
    }

    /// Ratio target_size / top_size for feedback into layer `l`, as a
    /// rational. >= 1 means the target is at least as large as the top.
    pub fn feedback_ratio(&self, l: usize) -> (u64, u64) {
        let (tn, td) = self.scale_at(l);
        let (on, od) = self.scale_at(self.num_layers());
        // (tn/td) / (on/od) = tn*od / (td*on)
        let num = tn * od;
        let den = td * on;
        let g = gcd(num, den);
        (num / g, den / g)
    }

    /// Structural validation. Hard errors for infeasible wiring; returns
    /// non-fatal warnings for layer choices that tend to work poorly.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.layers.is_empty() {
            return Err(Error::ArchError("architecture has no layers".into()));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::ArchError(format!(
                "classes must be in 2..=255, got {} (255 is reserved for void labels)",
                self.num_classes
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::ArchError("in_channels must be >= 1".into()));
        }
        if self.time_steps < 1 {
            return Err(Error::ArchError("steps must be >= 1".into()));
        }
        if self.fusion_weights.is_empty() {
            return Err(Error::ArchError("lambda must be nonempty".into()));
        }
        if self.fusion_weights.len() != self.time_steps {
            return Err(Error::ArchError(format!(
                "lambda has {} entries but steps = {}",
                self.fusion_weights.len(),
                self.time_steps
            )));
        }
        if *self.fusion_weights.last().unwrap() <= 0.0 {
            return Err(Error::ArchError("the last lambda entry must be > 0".into()));
        }
        if self.feedback_kernel == 0 || self.feedback_kernel % 2 == 0 {
            return Err(Error::ArchError(format!(
                "feedback_kernel must be odd, got {}",
                self.feedback_kernel
            )));
        }
        let l_count = self.num_layers();
        let mut prev = 0usize;
        for &l in &self.recurrent {
            if l < 1 || l > l_count {
                return Err(Error::ArchError(format!(
                    "recurrent index {l} outside 1..={l_count}"
                )));
            }
            if l == prev {
                return Err(Error::ArchError(format!("recurrent index {l} listed twice")));
            }
            prev = l;
            if !self.layers[l - 1].is_weighted() {
                return Err(Error::ArchError(format!(
                    "recurrent layer {l} is '{}'; feedback merges into the linear output of a conv or deconv layer",
                    self.layers[l - 1].name()
                )));
            }
            let (num, den) = self.feedback_ratio(l);
            if num < den {
                return Err(Error::ArchError(format!(
                    "layer {l} is spatially smaller than the top layer ({num}/{den}); downsampling feedback is not defined"
                )));
            }
            if num % den != 0 {
                return Err(Error::ArchError(format!(
                    "layer {l} to top size ratio {num}/{den} is not an integer; no feedback transform exists"
                )));
            }
        }

        let mut warnings = Vec::new();
        if self.recurrent.contains(&1) {
            warnings.push(
                "recurrent set includes layer 1; the lowest layers learn local patterns and feedback there rarely helps"
                    .to_string(),
            );
        }
        // A run of >= 3 consecutive weighted layers all receiving feedback.
        let weighted: Vec<usize> = (1..=l_count).filter(|l| self.layers[l - 1].is_weighted()).collect();
        let mut run = 0usize;
        for &l in &weighted {
            if self.recurrent.contains(&l) {
                run += 1;
                if run == 3 {
                    warnings.push(
                        "recurrent set covers 3+ consecutive weighted layers; neighboring layers carry redundant features"
                            .to_string(),
                    );
                }
            } else {
                run = 0;
            }
        }
        if !self.recurrent.is_empty() && self.time_steps == 1 {
            warnings.push("recurrent set is unused when steps = 1".to_string());
        }
        Ok(warnings)
    }
}

fn replace_once<T>(slot: &mut Option<T>, value: T, what: &str, line_no: usize) -> Result<()> {
    if slot.is_some() {
        return Err(Error::ArchError(format!("line {line_no}: duplicate directive '{what}'")));
    }
    *slot = Some(value);
    Ok(())
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a.max(1)
}
