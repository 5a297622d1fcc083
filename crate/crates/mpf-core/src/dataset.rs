//! Samples, manifest-backed datasets, and lazy loading with validation.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pnm;
use crate::tensor::{LabelMap, Tensor, VOID_LABEL};

/// One image paired with its per-pixel labels. Images hold values in
/// `[0, 1]`; labels are class indices with 255 = void.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub labels: LabelMap,
}

impl Sample {
    pub fn new(image: Tensor, labels: LabelMap) -> Result<Sample> {
        let s = image.shape();
        if s.height != labels.height || s.width != labels.width {
            return Err(Error::ShapeMismatch {
                context: "sample image vs labels".into(),
                lhs: format!("{}x{}", s.height, s.width),
                rhs: format!("{}x{}", labels.height, labels.width),
            });
        }
        Ok(Sample { image, labels })
    }
}

#[derive(Debug, Clone)]
enum Entry {
    Disk { image: PathBuf, labels: PathBuf },
    Memory(Sample),
}

/// A lazily loadable list of samples with a fixed class count.
#[derive(Debug, Clone)]
pub struct Dataset {
    entries: Vec<Entry>,
    pub num_classes: usize,
}

impl Dataset {
    /// Opens a manifest: one `image_path<TAB>label_path` line per sample,
    /// paths relative to the manifest's directory. Headers of every file are
    /// validated up front; pixel data loads lazily.
    pub fn open(manifest: &Path, num_classes: usize) -> Result<Dataset> {
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let base = manifest.parent().unwrap_or_else(|| Path::new("."));
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (img, lbl) = line.split_once('\t').ok_or_else(|| {
                Error::format(manifest, format!("line {}: expected image<TAB>labels", i + 1))
            })?;
            let image = base.join(img.trim());
            let labels = base.join(lbl.trim());
            let ih = pnm::read_header(&image)?;
            let lh = pnm::read_header(&labels)?;
            if ih.kind != pnm::PnmKind::Pixmap {
                return Err(Error::format(&image, "manifest image is not a P6 pixmap"));
            }
            if lh.kind != pnm::PnmKind::Graymap {
                return Err(Error::format(&labels, "manifest labels are not a P5 graymap"));
            }
            if (ih.width, ih.height) != (lh.width, lh.height) {
                return Err(Error::format(
                    &labels,
                    format!(
                        "label size {}x{} does not match image size {}x{}",
                        lh.width, lh.height, ih.width, ih.height
                    ),
                ));
            }
            entries.push(Entry::Disk { image, labels });
        }
        if entries.is_empty() {
            return Err(Error::format(manifest, "manifest lists no samples"));
        }
        Ok(Dataset { entries, num_classes })
    }

    /// Wraps in-memory samples, validating label ranges eagerly.
    pub fn from_samples(samples: Vec<Sample>, num_classes: usize) -> Result<Dataset> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("dataset needs at least one sample".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            check_labels(&s.labels, num_classes, &format!("sample {i}"))?;
        }
        Ok(Dataset { entries: samples.into_iter().map(Entry::Memory).collect(), num_classes })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads one sample, validating label range and image/label agreement.
    pub fn load(&self, index: usize) -> Result<Sample> {
        match &self.entries[index] {
            Entry::Memory(s) => Ok(s.clone()),
            Entry::Disk { image, labels } => {
                let img = pnm::read_image(image)?;
                let lbl = pnm::read_labels(labels)?;
                check_labels(&lbl, self.num_classes, &labels.display().to_string())?;
                Sample::new(img, lbl)
            }
        }
    }

    /// Collects every label map; used for class-frequency statistics.
    pub fn all_labels(&self) -> Result<Vec<LabelMap>> {
        (0..self.len()).map(|i| Ok(self.load(i)?.labels)).collect()
    }
}

fn check_labels(labels: &LabelMap, num_classes: usize, context: &str) -> Result<()> {
    for (i, &l) in labels.data.iter().enumerate() {
        if l != VOID_LABEL && l as usize >= num_classes {
            return Err(Error::LabelOutOfRange {
                value: l,
                num_classes,
                context: format!("{context}, pixel {i}"),
            });
        }
    }
    Ok(())
}

/// Per-class pixel frequencies over a dataset's label maps.
pub fn class_frequencies(dataset: &Dataset) -> Result<Vec<f64>> {
    let maps = dataset.all_labels()?;
    crate::loss::class_frequencies_from_maps(maps.iter(), dataset.num_classes)
}
