use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use super::DataError;
use crate::patchify::Image;

/// Images and soft targets after mixing.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub images: Vec<Image>,
    pub targets: Vec<Vec<f32>>,
    pub lambda: f64,
    pub permutation: Vec<usize>,
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f32> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}

/// Draws `λ ~ Beta(α, α)` and a random pairing, then mixes.
pub fn mixup<R: Rng>(
    images: &[Image],
    targets: &[Vec<f32>],
    alpha: f64,
    rng: &mut R,
) -> Result<MixedBatch, DataError> {
    if !(alpha > 0.0) {
        return Err(DataError::Invalid(format!(
            "mixup alpha must be > 0, got {alpha}"
        )));
    }
    if images.len() < 2 {
        return Err(DataError::Invalid(
            "mixup needs a batch of at least 2".into(),
        ));
    }
    let lambda = Beta::new(alpha, alpha)
        .map_err(|e| DataError::Invalid(e.to_string()))?
        .sample(rng);
    let mut perm: Vec<usize> = (0..images.len()).collect();
    perm.shuffle(rng);
    mixup_with(images, targets, lambda, &perm)
}

/// `λ·x_i + (1−λ)·x_perm[i]` for images and targets alike. Paired images must
/// share a size.
pub fn mixup_with(
    images: &[Image],
    targets: &[Vec<f32>],
    lambda: f64,
    perm: &[usize],
) -> Result<MixedBatch, DataError> {
    if images.len() != targets.len() || perm.len() != images.len() {
        return Err(DataError::CountMismatch {
            images: images.len(),
            labels: targets.len(),
        });
    }
    let l = lambda as f32;
    let mut out_images = Vec::with_capacity(images.len());
    let mut out_targets = Vec::with_capacity(images.len());
    for (i, &j) in perm.iter().enumerate() {
        let (a, b) = (&images[i], &images[j]);
        if (a.height(), a.width()) != (b.height(), b.width()) {
            return Err(DataError::Invalid(format!(
                "mixup pair ({i},{j}) has sizes {}x{} and {}x{}",
                a.height(),
                a.width(),
                b.height(),
                b.width()
            )));
        }
        let pixels = a
            .pixels()
            .iter()
            .zip(b.pixels())
            .map(|(x, y)| l * x + (1.0 - l) * y)
            .collect();
        out_images.push(Image::new(a.height(), a.width(), pixels).expect("same size"));
        out_targets.push(
            targets[i]
                .iter()
                .zip(&targets[j])
                .map(|(x, y)| l * x + (1.0 - l) * y)
                .collect(),
        );
    }
    Ok(MixedBatch {
        images: out_images,
        targets: out_targets,
        lambda,
        permutation: perm.to_vec(),
    })
}
