//! Weighted per-pixel cross entropy and class re-weighting.
//!
//! The loss is a plain sum over non-void pixels of `-w[y] * ln p[y]`; any
//! batch-size normalization happens in the trainer, where the divisor is part
//! of the recorded configuration. Class weights follow
//! `w = 2^ceil(log10(eta / f))` with `eta` picked by a frequent/rare prefix
//! rule over the class-frequency histogram.

use crate::error::{Error, Result};
use crate::layers::PROB_FLOOR;
use crate::tensor::{LabelMap, Tensor, VOID_LABEL};

/// Per-class pixel frequencies, the derived threshold, and the loss weights.
#[derive(Debug, Clone)]
pub struct ClassStats {
    pub frequencies: Vec<f64>,
    pub eta: f64,
    pub weights: Vec<f64>,
}

impl ClassStats {
    /// Derives eta (via `threshold`, conventionally 0.85) and the weights
    /// from a frequency histogram.
    pub fn from_frequencies(frequencies: Vec<f64>, threshold: f64) -> ClassStats {
        let eta = eta_from_rule(&frequencies, threshold);
        let weights = class_weights(&frequencies, eta);
        ClassStats { frequencies, eta, weights }
    }

    /// Text table: one `class, frequency, weight` row per class.
    pub fn report(&self) -> String {
        let mut out = String::from("class  frequency    weight\n");
        for (k, (f, w)) in self.frequencies.iter().zip(&self.weights).enumerate() {
            out.push_str(&format!("{k:>5}  {f:>9.6}  {w:>8.4}\n"));
        }
        out.push_str(&format!("eta = {:.6}\n", self.eta));
        out
    }
}

/// Pixel-count fraction per class over a set of label maps, ignoring void
/// pixels. Frequencies sum to 1 over the classes that appear.
pub fn class_frequencies_from_maps<'a>(
    maps: impl IntoIterator<Item = &'a LabelMap>,
    num_classes: usize,
) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; num_classes];
    let mut seen_any = false;
    for map in maps {
        seen_any = true;
        for (i, &l) in map.data.iter().enumerate() {
            if l == VOID_LABEL {
                continue;
            }
            if (l as usize) >= num_classes {
                return Err(Error::LabelOutOfRange {
                    value: l,
                    num_classes,
                    context: format!("label map pixel {i}"),
                });
            }
            counts[l as usize] += 1;
        }
    }
    if !seen_any {
        return Err(Error::InvalidArgument("class frequencies over an empty dataset".into()));
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("all pixels are void; no class frequencies".into()));
    }
    Ok(counts.iter().map(|c| *c as f64 / total as f64).collect())
}

/// Frequency of the last class inside the smallest descending-frequency
/// prefix whose cumulative frequency reaches `threshold`. Frequency ties
/// break by class index, making the rule deterministic and invariant under
/// permutations of equal-frequency classes.
pub fn eta_from_rule(frequencies: &[f64], threshold: f64) -> f64 {
    let mut order: Vec<usize> = (0..frequencies.len()).collect();
    order.sort_by(|&a, &b| {
        frequencies[b]
            .partial_cmp(&frequencies[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut cumulative = 0.0;
    let mut last_positive = 0.0;
    for &k in &order {
        if frequencies[k] <= 0.0 {
            break;
        }
        cumulative += frequencies[k];
        last_positive = frequencies[k];
        if cumulative >= threshold {
            return frequencies[k];
        }
    }
    last_positive
}

/// `w_k = 2^ceil(log10(eta / f_k))`; zero-frequency classes get weight 0
/// (the formula is undefined at f = 0 and such classes never contribute to
/// the loss). Ratios within 1e-12 of an exact power of ten snap to the
/// integer exponent so the ceil does not jump on rounding noise.
pub fn class_weights(frequencies: &[f64], eta: f64) -> Vec<f64> {
    frequencies
        .iter()
        .map(|&f| {
            if f <= 0.0 {
                return 0.0;
            }
            let r = (eta / f).log10();
            let snapped = if (r - r.round()).abs() < 1e-12 { r.round() } else { r };
            2f64.powi(snapped.ceil() as i32)
        })
        .collect()
}

fn label_at(labels: &Tensor, idx: usize, num_classes: usize) -> Result<Option<usize>> {
    let lv = labels.data()[idx];
    if lv.fract() != 0.0 || !(0.0..=u16::MAX as f64).contains(&lv) {
        return Err(Error::LabelOutOfRange {
            value: 0,
            num_classes,
            context: format!("non-integer label value {lv}"),
        });
    }
    let l = lv as u32;
    if l == VOID_LABEL as u32 {
        return Ok(None);
    }
    if l as usize >= num_classes {
        return Err(Error::LabelOutOfRange {
            value: l as u16,
            num_classes,
            context: "cross entropy".into(),
        });
    }
    Ok(Some(l as usize))
}

/// `-sum over non-void pixels of w[y] * ln p[y]`. `probs` is `(B,K,H,W)`,
/// `labels` is `(B,1,H,W)` holding integer class values (255 = void).
pub fn weighted_ce_forward(probs: &Tensor, labels: &Tensor, weights: &[f64]) -> Result<f64> {
    let ps = probs.shape();
    let plane = ps.height * ps.width;
    let mut loss = 0.0;
    for b in 0..ps.batch {
        for p in 0..plane {
            let Some(y) = label_at(labels, b * plane + p, weights.len())? else { continue };
            let prob = probs.data()[(b * ps.channels + y) * plane + p];
            // f64::max would silently swallow a NaN probability; a non-finite
            // network output must surface as a non-finite loss so divergence
            // detection can see it.
            if prob.is_nan() {
                return Ok(f64::NAN);
            }
            loss -= weights[y] * prob.max(PROB_FLOOR).ln();
        }
    }
    Ok(loss)
}

/// Gradient of [`weighted_ce_forward`] with respect to the probabilities,
/// scaled by `upstream`.
pub fn weighted_ce_backward(
    probs: &Tensor,
    labels: &Tensor,
    weights: &[f64],
    upstream: f64,
) -> Result<Tensor> {
    let ps = probs.shape();
    let plane = ps.height * ps.width;
    let mut dp = vec![0.0; ps.numel()];
    for b in 0..ps.batch {
        for p in 0..plane {
            let Some(y) = label_at(labels, b * plane + p, weights.len())? else { continue };
            let i = (b * ps.channels + y) * plane + p;
            let prob = probs.data()[i];
            if prob > PROB_FLOOR {
                dp[i] = -upstream * weights[y] / prob;
            }
        }
    }
    Tensor::from_vec(ps, probs.precision(), dp)
}

/// Convenience wrapper taking a label map directly.
pub fn weighted_pixel_ce(probs: &Tensor, labels: &LabelMap, weights: &[f64]) -> Result<f64> {
    weighted_ce_forward(probs, &labels.to_tensor(probs.precision()), weights)
}
