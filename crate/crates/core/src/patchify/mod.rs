//! Top-down multi-zoom patch extraction.
//!
//! A patch is addressed by `(x, y, z)`: a relative center in `[0,1]²` and a zoom
//! level. The crop side is `min(H, W) / 2^z` image pixels, so the same
//! coordinates cover the same part of an image at any resolution. Every crop is
//! bilinearly resampled to a fixed `P×P` grid; samples falling outside the image
//! read as zero.

mod oracle;

use rayon::prelude::*;
use thiserror::Error;

pub use oracle::bilinear_oracle;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatchError {
    #[error("zoom level must be non-negative, got {0}")]
    NegativeZoom(f64),
    #[error("patch count must be at least 1")]
    EmptySchedule,
    #[error("patch side must be at least 1")]
    ZeroPatchSize,
    #[error("image {height}x{width} is not divisible into {patch}x{patch} tiles")]
    Indivisible {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("image has {actual} values, expected {height}x{width}x3 = {expected}")]
    PixelCount {
        height: usize,
        width: usize,
        expected: usize,
        actual: usize,
    },
    #[error("image dimensions must be positive, got {height}x{width}")]
    EmptyImage { height: usize, width: usize },
}

/// RGB image, `H×W×3` row-major, values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    /// Values are clamped into `[0,1]`.
    pub fn new(height: usize, width: usize, mut pixels: Vec<f32>) -> Result<Self, PatchError> {
        if height == 0 || width == 0 {
            return Err(PatchError::EmptyImage { height, width });
        }
        let expected = height * width * 3;
        if pixels.len() != expected {
            return Err(PatchError::PixelCount {
                height,
                width,
                expected,
                actual: pixels.len(),
            });
        }
        pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        Self {
            height,
            width,
            pixels: vec![value.clamp(0.0, 1.0); height * width * 3],
        }
    }

    /// Replicates a single-channel image into three channels.
    pub fn from_gray(height: usize, width: usize, gray: &[f32]) -> Result<Self, PatchError> {
        let pixels = gray.iter().flat_map(|&g| [g, g, g]).collect();
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f32) {
        self.pixels[(y * self.width + x) * 3 + c] = value.clamp(0.0, 1.0);
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        assert!(height > 0 && width > 0, "empty target size");
        let taps = |out: usize, src: usize| -> Vec<(usize, usize, f32)> {
            let ratio = src as f64 / out as f64;
            (0..out)
                .map(|i| {
                    let s = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
                    let i0 = s.floor() as usize;
                    let i1 = (i0 + 1).min(src - 1);
                    (i0, i1, (s - i0 as f64) as f32)
                })
                .collect()
        };
        let rows = taps(height, self.height);
        let cols = taps(width, self.width);
        let mut pixels = Vec::with_capacity(height * width * 3);
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                for c in 0..3 {
                    let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
                    let bottom = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
                    pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
                }
            }
        }
        Image {
            height,
            width,
            pixels,
        }
    }

    /// Copy of the `h×w` region starting at `(top, left)`; must lie inside.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Image {
        assert!(
            top + h <= self.height && left + w <= self.width,
            "crop outside image"
        );
        let mut pixels = Vec::with_capacity(h * w * 3);
        for y in top..top + h {
            let start = (y * self.width + left) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + w * 3]);
        }
        Image {
            height: h,
            width: w,
            pixels,
        }
    }
}

/// Relative gaze location; both coordinates are clamped into `[0,1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GazeCenter {
    x: f64,
    y: f64,
}

impl GazeCenter {
    pub fn new(x: f64, y: f64) -> Self {
        let clamp = |v: f64| if v.is_nan() { 0.5 } else { v.clamp(0.0, 1.0) };
        Self {
            x: clamp(x),
            y: clamp(y),
        }
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }
}

/// Evenly spaced zoom levels `0..=max_z`, one per patch of a glimpse.
#[derive(Clone, Debug, PartialEq)]
pub struct ZoomSchedule {
    max_z: f64,
    zs: Vec<f64>,
}

impl ZoomSchedule {
    pub fn new(count: usize, max_z: f64) -> Result<Self, PatchError> {
        if count == 0 {
            return Err(PatchError::EmptySchedule);
        }
        if !(max_z >= 0.0) {
            return Err(PatchError::NegativeZoom(max_z));
        }
        let zs = if count == 1 {
            vec![0.0]
        } else {
            let last = (count - 1) as f64;
            (0..count).map(|i| max_z * (i as f64 / last)).collect()
        };
        Ok(Self { max_z, zs })
    }

    pub fn len(&self) -> usize {
        self.zs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zs.is_empty()
    }

    pub fn max_z(&self) -> f64 {
        self.max_z
    }

    pub fn zs(&self) -> &[f64] {
        &self.zs
    }

    /// Zoom levels rescaled to `[0,1]`; all zero when `max_z == 0`.
    pub fn normalized(&self) -> Vec<f64> {
        if self.max_z == 0.0 {
            vec![0.0; self.zs.len()]
        } else {
            self.zs.iter().map(|z| z / self.max_z).collect()
        }
    }
}

/// The patches of one glimpse: `M` crops sharing a center.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub patch_size: usize,
    pub center: GazeCenter,
    pub schedule: ZoomSchedule,
    /// `M×P×P×3`, patch-major.
    pub patches: Vec<f32>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.schedule.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schedule.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let n = self.patch_size * self.patch_size * 3;
        &self.patches[i * n..(i + 1) * n]
    }

    pub fn z_norm(&self) -> Vec<f64> {
        self.schedule.normalized()
    }
}

/// Side of the square crop at zoom `z`: `min(H, W) / 2^z`.
pub fn crop_size(height: usize, width: usize, z: f64) -> Result<f64, PatchError> {
    if !(z >= 0.0) {
        return Err(PatchError::NegativeZoom(z));
    }
    Ok(height.min(width) as f64 / 2f64.powf(z))
}

/// Per-output-index source taps along one axis: `(index, weight)` pairs that
/// fall inside `0..len`.
fn axis_taps(len: usize, out: usize, scale: f64, translate: f64) -> Vec<[(usize, f64); 2]> {
    (0..out)
        .map(|j| {
            let s = (j as f64 + 0.5 - translate) / scale - 0.5;
            let i0 = s.floor();
            let f = s - i0;
            let tap = |idx: f64, w: f64| {
                if idx >= 0.0 && idx < len as f64 {
                    (idx as usize, w)
                } else {
                    (0, 0.0)
                }
            };
            [tap(i0, 1.0 - f), tap(i0 + 1.0, f)]
        })
        .collect()
}

/// Crop of side `crop_size(H, W, z)` centred at `(x·W, y·H)`, bilinearly
/// resampled to `P×P×3` with scale `P / C` and translation `P/2 - scale·center`.
pub fn extract_patch(
    image: &Image,
    center: GazeCenter,
    z: f64,
    patch_size: usize,
) -> Result<Vec<f32>, PatchError> {
    if patch_size == 0 {
        return Err(PatchError::ZeroPatchSize);
    }
    let side = crop_size(image.height, image.width, z)?;
    let scale = patch_size as f64 / side;
    let cx = center.x * image.width as f64;
    let cy = center.y * image.height as f64;
    let half = patch_size as f64 / 2.0;
    let rows = axis_taps(image.height, patch_size, scale, half - scale * cy);
    let cols = axis_taps(image.width, patch_size, scale, half - scale * cx);

    let mut out = vec![0f32; patch_size * patch_size * 3];
    for (r, row_taps) in rows.iter().enumerate() {
        for (c, col_taps) in cols.iter().enumerate() {
            let mut acc = [0f64; 3];
            for &(y, wy) in row_taps {
                if wy == 0.0 {
                    continue;
                }
                for &(x, wx) in col_taps {
                    if wx == 0.0 {
                        continue;
                    }
                    let w = wy * wx;
                    let base = (y * image.width + x) * 3;
                    for ch in 0..3 {
                        acc[ch] += w * image.pixels[base + ch] as f64;
                    }
                }
            }
            let o = (r * patch_size + c) * 3;
            for ch in 0..3 {
                out[o + ch] = (acc[ch] as f32).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// One patch per zoom level of `schedule`, all around `center`.
pub fn extract_multizoom(
    image: &Image,
    center: GazeCenter,
    patch_size: usize,
    schedule: &ZoomSchedule,
) -> Result<PatchSet, PatchError> {
    let mut patches = Vec::with_capacity(schedule.len() * patch_size * patch_size * 3);
    for &z in schedule.zs() {
        patches.extend(extract_patch(image, center, z, patch_size)?);
    }
    Ok(PatchSet {
        patch_size,
        center,
        schedule: schedule.clone(),
        patches,
    })
}

/// [`extract_multizoom`] over `(image, center)` pairs, in parallel.
pub fn extract_multizoom_batch(
    images: &[Image],
    centers: &[GazeCenter],
    patch_size: usize,
    schedule: &ZoomSchedule,
) -> Result<Vec<PatchSet>, PatchError> {
    assert_eq!(images.len(), centers.len(), "one center per image");
    images
        .par_iter()
        .zip(centers.par_iter())
        .map(|(img, &c)| extract_multizoom(img, c, patch_size, schedule))
        .collect()
}

/// A tile of the classic non-overlapping ViT grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPatch {
    pub row: usize,
    pub col: usize,
    /// `P×P×3`
    pub pixels: Vec<f32>,
}

/// Raster-order `P×P` tiles. Both sides must be divisible by `P`.
pub fn extract_vit_grid(image: &Image, patch_size: usize) -> Result<Vec<GridPatch>, PatchError> {
    if patch_size == 0 {
        return Err(PatchError::ZeroPatchSize);
    }
    if !image.height.is_multiple_of(patch_size) || !image.width.is_multiple_of(patch_size) {
        return Err(PatchError::Indivisible {
            height: image.height,
            width: image.width,
            patch: patch_size,
        });
    }
    let (rows, cols) = (image.height / patch_size, image.width / patch_size);
    let mut out = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let tile = image.crop(row * patch_size, col * patch_size, patch_size, patch_size);
            out.push(GridPatch {
                row,
                col,
                pixels: tile.pixels,
            });
        }
    }
    Ok(out)
}

/// Reassembles raster-order tiles into an image.
pub fn assemble_grid(tiles: &[GridPatch], rows: usize, cols: usize, patch_size: usize) -> Image {
    let (h, w) = (rows * patch_size, cols * patch_size);
    let mut img = Image::zeros(h, w);
    for t in tiles {
        for y in 0..patch_size {
            let dst = ((t.row * patch_size + y) * w + t.col * patch_size) * 3;
            let src = y * patch_size * 3;
            img.pixels[dst..dst + patch_size * 3]
                .copy_from_slice(&t.pixels[src..src + patch_size * 3]);
        }
    }
    img
}

#[cfg(test)]
mod tests;
