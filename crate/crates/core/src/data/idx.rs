//! IDX container (the MNIST distribution format): big-endian magic and
//! dimension sizes followed by raw row-major `u8` payload.

use std::path::Path;

use super::{DataError, LabeledDataset, Split};
use crate::patchify::Image;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxLabels {
    pub labels: Vec<u8>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], DataError> {
        if self.bytes.len() - self.pos < n {
            return Err(DataError::Truncated {
                what: self.what,
                field,
                offset: self.bytes.len(),
                needed: self.pos + n,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, DataError> {
        let b = self.take(4, field)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<(), DataError> {
        let found = self.u32("magic")?;
        if found != expected {
            return Err(DataError::BadMagic {
                what: self.what,
                offset: 0,
                expected,
                found,
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), DataError> {
        if self.pos != self.bytes.len() {
            return Err(DataError::TrailingBytes {
                what: self.what,
                offset: self.pos,
            });
        }
        Ok(())
    }
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, DataError> {
    let mut r = Reader {
        bytes,
        pos: 0,
        what: "idx images",
    };
    r.magic(IMAGES_MAGIC)?;
    let count = r.u32("image count")? as usize;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    let pixels = r.take(count * rows * cols, "pixel data")?.to_vec();
    r.finish()?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<IdxLabels, DataError> {
    let mut r = Reader {
        bytes,
        pos: 0,
        what: "idx labels",
    };
    r.magic(LABELS_MAGIC)?;
    let count = r.u32("label count")? as usize;
    let labels = r.take(count, "label data")?.to_vec();
    r.finish()?;
    Ok(IdxLabels { labels })
}

impl IdxImages {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len());
        for v in [
            IMAGES_MAGIC,
            self.count as u32,
            self.rows as u32,
            self.cols as u32,
        ] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Grayscale bytes scaled to `[0,1]` and replicated to three channels.
    pub fn image(&self, i: usize) -> Image {
        let n = self.rows * self.cols;
        let gray: Vec<f32> = self.pixels[i * n..(i + 1) * n]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        Image::from_gray(self.rows, self.cols, &gray).expect("dimensions from header")
    }

    /// Quantises grayscale images (channel 0) back to bytes.
    pub fn from_images(images: &[Image]) -> Result<Self, DataError> {
        let first = images.first().ok_or(DataError::Empty)?;
        let (rows, cols) = (first.height(), first.width());
        let mut pixels = Vec::with_capacity(images.len() * rows * cols);
        for img in images {
            if (img.height(), img.width()) != (rows, cols) {
                return Err(DataError::Invalid(format!(
                    "IDX needs uniform sizes, got {}x{} and {rows}x{cols}",
                    img.height(),
                    img.width()
                )));
            }
            pixels.extend(img.pixels().chunks(3).map(|px| to_byte(px[0])));
        }
        Ok(Self {
            count: images.len(),
            rows,
            cols,
            pixels,
        })
    }
}

impl IdxLabels {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.labels.len());
        out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(self.labels.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.labels);
        out
    }
}

pub(crate) fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads an image/label file pair. Classes are `max(label) + 1`, at least 10.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: Split,
) -> Result<LabeledDataset, DataError> {
    let images = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if images.count != labels.labels.len() {
        return Err(DataError::CountMismatch {
            images: images.count,
            labels: labels.labels.len(),
        });
    }
    let classes = labels
        .labels
        .iter()
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(0)
        .max(10);
    LabeledDataset::new(
        (0..images.count).map(|i| images.image(i)).collect(),
        labels.labels.iter().map(|&l| l as usize).collect(),
        classes,
        split,
    )
}

pub fn write_idx(
    dataset: &LabeledDataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<(), DataError> {
    let images = IdxImages::from_images(&dataset.images)?;
    let labels = IdxLabels {
        labels: dataset.labels.iter().map(|&l| l as u8).collect(),
    };
    std::fs::write(images_path, images.to_bytes())?;
    std::fs::write(labels_path, labels.to_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> IdxImages {
        IdxImages {
            count: 2,
            rows: 3,
            cols: 2,
            pixels: vec![0, 255, 17, 128, 3, 99, 200, 1, 2, 3, 4, 5],
        }
    }

    #[test]
    fn reserialises_bit_exactly() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        let parsed = parse_idx_images(&bytes).unwrap();
        assert_eq!(parsed, sample());
        assert_eq!(parsed.to_bytes(), bytes);
        let labels = IdxLabels { labels: vec![7, 2] };
        let lb = labels.to_bytes();
        assert_eq!(&lb[..4], &[0, 0, 8, 1]);
        assert_eq!(parse_idx_labels(&lb).unwrap().to_bytes(), lb);
    }

    #[test]
    fn pixels_scale_to_unit_range_in_three_channels() {
        let img = sample().image(0);
        assert_eq!((img.height(), img.width()), (3, 2));
        assert_eq!(&img.pixels()[..6], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn truncation_reports_exact_offset() {
        let bytes = sample().to_bytes();
        let err = parse_idx_images(&bytes[..20]).unwrap_err();
        assert_eq!(
            err,
            DataError::Truncated {
                what: "idx images",
                field: "pixel data",
                offset: 20,
                needed: 28
            }
        );
        let err = parse_idx_images(&bytes[..6]).unwrap_err();
        assert!(matches!(
            err,
            DataError::Truncated {
                field: "image count",
                offset: 6,
                ..
            }
        ));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let bytes = IdxLabels { labels: vec![1] }.to_bytes();
        let err = parse_idx_images(&bytes).unwrap_err();
        assert!(matches!(
            err,
            DataError::BadMagic {
                found: 0x801,
                offset: 0,
                ..
            }
        ));
    }

    #[test]
    fn mismatched_label_count_is_an_error() {
        let dir = std::env::temp_dir().join(format!("foveate-idx-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let (ip, lp) = (dir.join("img.idx"), dir.join("lbl.idx"));
        std::fs::write(&ip, sample().to_bytes()).unwrap();
        std::fs::write(
            &lp,
            IdxLabels {
                labels: vec![1, 2, 3],
            }
            .to_bytes(),
        )
        .unwrap();
        let err = load_idx(&ip, &lp, Split::Train).unwrap_err();
        assert!(matches!(
            err,
            DataError::CountMismatch {
                images: 2,
                labels: 3
            }
        ));
        std::fs::write(&lp, IdxLabels { labels: vec![1, 2] }.to_bytes()).unwrap();
        let ds = load_idx(&ip, &lp, Split::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![1, 2]);
        std::fs::remove_dir_all(&dir).ok();
    }
}
