//! Dataset ingestion (IDX, PPM, plain-text manifests), procedural datasets
//! and MixUp.

mod idx;
mod mixup;
mod ppm;
pub mod synth;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use idx::{
    load_idx, parse_idx_images, parse_idx_labels, write_idx, IdxImages, IdxLabels, IMAGES_MAGIC,
    LABELS_MAGIC,
};
pub use mixup::{mixup, mixup_with, one_hot, MixedBatch};
pub use ppm::{decode_ppm, encode_ppm, load_ppm, write_ppm};

use crate::patchify::Image;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DataError {
    #[error("io: {0}")]
    Io(String),
    #[error("empty dataset")]
    Empty,
    #[error("{0}")]
    Invalid(String),
    #[error("unsupported format: {0}")]
    Unsupported(String),
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{what}: truncated while reading {field}: file has {offset} bytes, need {needed}")]
    Truncated {
        what: &'static str,
        field: &'static str,
        offset: usize,
        needed: usize,
    },
    #[error("{what}: bad magic at byte {offset}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        what: &'static str,
        offset: usize,
        expected: u32,
        found: u32,
    },
    #[error("{what}: unexpected trailing bytes from offset {offset}")]
    TrailingBytes { what: &'static str, offset: usize },
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Images (sizes may differ) with integer labels in `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<Image>,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
    ) -> Result<Self, DataError> {
        if images.len() != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DataError::Invalid(format!(
                "label {l} at index {i} outside 0..{classes}"
            )));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
        }
    }

    /// Splits off the last `count` items.
    pub fn split_off(mut self, count: usize, split: Split) -> (Self, Self) {
        let at = self.len().saturating_sub(count);
        let tail = Self {
            images: self.images.split_off(at),
            labels: self.labels.split_off(at),
            classes: self.classes,
            split,
        };
        (self, tail)
    }
}

/// Visiting order for one epoch; a pure function of `(len, seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Reads a manifest of `path label` lines (paths relative to the manifest's
/// directory, `#` starts a comment) and loads the listed PPM images.
pub fn load_manifest(path: impl AsRef<Path>, split: Split) -> Result<LabeledDataset, DataError> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(path)?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (file, label) = line.rsplit_once(char::is_whitespace).ok_or_else(|| {
            DataError::Invalid(format!(
                "manifest line {}: expected `path label`",
                lineno + 1
            ))
        })?;
        let label: usize = label.parse().map_err(|_| {
            DataError::Invalid(format!("manifest line {}: bad label `{label}`", lineno + 1))
        })?;
        images.push(load_ppm(base.join(file.trim()))?);
        labels.push(label);
    }
    if images.is_empty() {
        return Err(DataError::Empty);
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(images, labels, classes, split)
}
