use rayon::prelude::*;

use super::{EncoderConfig, ModelError};
use crate::patchify::{
    extract_multizoom, extract_vit_grid, GazeCenter, Image, PatchSet, ZoomSchedule,
};
use crate::tensor::{Real, Tensor};

/// Encoder input for a batch: `tokens` patches per item with their
/// `(x, y, z_norm)` coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Glimpses<T> {
    pub batch: usize,
    pub tokens: usize,
    /// `[batch * tokens, P*P*3]`
    pub patches: Tensor<T>,
    /// `[batch * tokens, 3]`
    pub coords: Tensor<T>,
}

impl<T: Real> Glimpses<T> {
    /// Assembles a batch from flat patch pixels and coordinates (row-major over
    /// items, then tokens). Coordinates must lie in `[0,1]`.
    pub fn from_parts(
        batch: usize,
        tokens: usize,
        patch_len: usize,
        patches: &[f32],
        coords: &[[f64; 3]],
    ) -> Result<Self, ModelError> {
        if let Some((i, v)) = coords
            .iter()
            .flatten()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ModelError::PositionOutOfRange {
                index: i,
                value: *v,
            });
        }
        let patches = Tensor::new(
            &[batch * tokens, patch_len],
            patches.iter().map(|&v| T::lit(v as f64)).collect(),
        )?;
        let coords = Tensor::new(
            &[batch * tokens, 3],
            coords.iter().flatten().map(|&v| T::lit(v)).collect(),
        )?;
        Ok(Self {
            batch,
            tokens,
            patches,
            coords,
        })
    }

    pub fn from_patch_sets(sets: &[PatchSet]) -> Result<Self, ModelError> {
        let first = sets
            .first()
            .ok_or_else(|| ModelError::Shape("empty glimpse batch".into()))?;
        let (m, p) = (first.len(), first.patch_size);
        let mut pixels = Vec::with_capacity(sets.len() * m * p * p * 3);
        let mut coords = Vec::with_capacity(sets.len() * m);
        for set in sets {
            if set.len() != m || set.patch_size != p {
                return Err(ModelError::Shape(format!(
                    "glimpses of {}x{}px and {}x{}px patches in one batch",
                    set.len(),
                    set.patch_size,
                    m,
                    p
                )));
            }
            pixels.extend_from_slice(&set.patches);
            for z in set.z_norm() {
                coords.push([set.center.x(), set.center.y(), z]);
            }
        }
        Self::from_parts(sets.len(), m, p * p * 3, &pixels, &coords)
    }

    /// Multi-zoom glimpses, one per image, at the given centers.
    pub fn multizoom(
        images: &[&Image],
        centers: &[GazeCenter],
        config: &EncoderConfig,
    ) -> Result<Self, ModelError> {
        if images.len() != centers.len() {
            return Err(ModelError::Shape(format!(
                "{} images but {} gaze centers",
                images.len(),
                centers.len()
            )));
        }
        let schedule = ZoomSchedule::new(config.patch_count, config.max_zoom)?;
        let sets = images
            .par_iter()
            .zip(centers)
            .map(|(img, &c)| extract_multizoom(img, c, config.patch_size, &schedule))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_patch_sets(&sets)
    }

    /// Non-overlapping grid tiles of each image, selected by `select[i]` (all
    /// tiles when `None`). Every image must produce the same number of
    /// selected tiles.
    pub fn grid(
        images: &[&Image],
        select: Option<&[Vec<usize>]>,
        config: &EncoderConfig,
    ) -> Result<Self, ModelError> {
        let p = config.patch_size;
        let mut pixels = Vec::new();
        let mut coords = Vec::new();
        let mut tokens = None;
        for (i, img) in images.iter().enumerate() {
            let tiles = extract_vit_grid(img, p)?;
            let z = grid_zoom(img, p, config.max_zoom);
            let pick: Vec<usize> = match select {
                Some(sel) => sel[i].clone(),
                None => (0..tiles.len()).collect(),
            };
            if *tokens.get_or_insert(pick.len()) != pick.len() {
                return Err(ModelError::Shape("ragged grid selection".into()));
            }
            for &j in &pick {
                let t = tiles.get(j).ok_or_else(|| {
                    ModelError::Shape(format!("tile {j} of {} requested", tiles.len()))
                })?;
                pixels.extend_from_slice(&t.pixels);
                coords.push([
                    (t.col as f64 + 0.5) * p as f64 / img.width() as f64,
                    (t.row as f64 + 0.5) * p as f64 / img.height() as f64,
                    z,
                ]);
            }
        }
        Self::from_parts(
            images.len(),
            tokens.unwrap_or(0),
            p * p * 3,
            &pixels,
            &coords,
        )
    }
}

/// Normalised zoom at which a crop has exactly `p` pixels on its side.
pub fn grid_zoom(image: &Image, p: usize, max_zoom: f64) -> f64 {
    if max_zoom <= 0.0 {
        return 0.0;
    }
    let side = image.height().min(image.width()) as f64;
    ((side / p as f64).log2() / max_zoom).clamp(0.0, 1.0)
}
