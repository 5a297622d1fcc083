//! Per-pixel evaluation metrics over a confusion matrix: pixel accuracy,
//! mean per-class accuracy, and mean intersection-over-union.

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, VOID_LABEL};

/// `K x K` counts with rows = ground truth and columns = prediction.
/// Void ground-truth pixels are excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> ConfusionMatrix {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, truth: usize, prediction: usize) -> u64 {
        self.counts[truth * self.num_classes + prediction]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/truth pair of label maps.
    pub fn accumulate(&mut self, predictions: &LabelMap, truth: &LabelMap) -> Result<()> {
        if predictions.height != truth.height || predictions.width != truth.width {
            return Err(Error::ShapeMismatch {
                context: "confusion matrix accumulate".into(),
                lhs: format!("{}x{}", predictions.height, predictions.width),
                rhs: format!("{}x{}", truth.height, truth.width),
            });
        }
        for (i, (&p, &t)) in predictions.data.iter().zip(&truth.data).enumerate() {
            if t == VOID_LABEL {
                continue;
            }
            if t as usize >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    value: t,
                    num_classes: self.num_classes,
                    context: format!("truth pixel {i}"),
                });
            }
            if p as usize >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    value: p,
                    num_classes: self.num_classes,
                    context: format!("prediction pixel {i}"),
                });
            }
            self.counts[t as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Adds another matrix; merging is associative and commutative, so
    /// per-worker matrices can be combined in any order.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.num_classes != other.num_classes {
            return Err(Error::ShapeMismatch {
                context: "confusion matrix merge".into(),
                lhs: self.num_classes.to_string(),
                rhs: other.num_classes.to_string(),
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row_sum(&self, k: usize) -> u64 {
        self.counts[k * self.num_classes..(k + 1) * self.num_classes].iter().sum()
    }

    fn col_sum(&self, k: usize) -> u64 {
        (0..self.num_classes).map(|t| self.count(t, k)).sum()
    }

    /// Fraction of all evaluated pixels classified correctly. Vacuously 1
    /// when nothing was evaluated.
    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 1.0;
        }
        let correct: u64 = (0..self.num_classes).map(|k| self.count(k, k)).sum();
        correct as f64 / total as f64
    }

    /// Recall of one class, when it has ground-truth pixels.
    pub fn class_recall(&self, k: usize) -> Option<f64> {
        let row = self.row_sum(k);
        if row == 0 {
            None
        } else {
            Some(self.count(k, k) as f64 / row as f64)
        }
    }

    /// Mean of per-class recalls over classes present in the ground truth.
    pub fn class_accuracy(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for k in 0..self.num_classes {
            if let Some(r) = self.class_recall(k) {
                sum += r;
                n += 1;
            }
        }
        if n == 0 {
            1.0
        } else {
            sum / n as f64
        }
    }

    /// Intersection-over-union of one class, when it appears in the truth or
    /// the predictions.
    pub fn class_iou(&self, k: usize) -> Option<f64> {
        let inter = self.count(k, k);
        let union = self.row_sum(k) + self.col_sum(k) - inter;
        if union == 0 {
            None
        } else {
            Some(inter as f64 / union as f64)
        }
    }

    /// Mean IoU over classes present in the truth or the predictions.
    pub fn mean_iou(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for k in 0..self.num_classes {
            if let Some(v) = self.class_iou(k) {
                sum += v;
                n += 1;
            }
        }
        if n == 0 {
            1.0
        } else {
            sum / n as f64
        }
    }

    /// Human-readable per-class table plus the summary metrics.
    pub fn report(&self) -> String {
        let mut out = String::from("class   accuracy        iou\n");
        for k in 0..self.num_classes {
            let acc = self
                .class_recall(k)
                .map(|v| format!("{v:.6}"))
                .unwrap_or_else(|| "-".into());
            let iou = self
                .class_iou(k)
                .map(|v| format!("{v:.6}"))
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!("{k:>5}  {acc:>9}  {iou:>9}\n"));
        }
        out.push_str(&format!(
            "PA = {:.6}  CA = {:.6}  mIoU = {:.6}\n",
            self.pixel_accuracy(),
            self.class_accuracy(),
            self.mean_iou()
        ));
        out
    }

    /// CSV with one row per class and summary rows keyed `PA`/`CA`/`mIoU`.
    pub fn report_csv(&self) -> String {
        let mut out = String::from("class,accuracy,iou\n");
        for k in 0..self.num_classes {
            let acc = self.class_recall(k).map(|v| v.to_string()).unwrap_or_default();
            let iou = self.class_iou(k).map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{k},{acc},{iou}\n"));
        }
        out.push_str(&format!("PA,{},\n", self.pixel_accuracy()));
        out.push_str(&format!("CA,{},\n", self.class_accuracy()));
        out.push_str(&format!("mIoU,{},\n", self.mean_iou()));
        out
    }
}
