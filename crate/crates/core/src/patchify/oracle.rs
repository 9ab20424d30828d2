use super::{GazeCenter, Image, PatchError};

/// Reference resampler: one output pixel at a time, straight from the crop
/// geometry. Deliberately shares no code with [`super::extract_patch`] so the
/// two can be checked against each other.
pub fn bilinear_oracle(
    image: &Image,
    center: GazeCenter,
    z: f64,
    patch_size: usize,
) -> Result<Vec<f32>, PatchError> {
    if z < 0.0 || z.is_nan() {
        return Err(PatchError::NegativeZoom(z));
    }
    if patch_size == 0 {
        return Err(PatchError::ZeroPatchSize);
    }
    let (h, w) = (image.height() as i64, image.width() as i64);
    let side = (h.min(w) as f64) * 0.5f64.powf(z);
    let pixel = side / patch_size as f64;
    let left = center.x() * w as f64 - side / 2.0;
    let top = center.y() * h as f64 - side / 2.0;

    let read = |y: i64, x: i64, c: usize| -> f64 {
        if y < 0 || x < 0 || y >= h || x >= w {
            0.0
        } else {
            image.get(y as usize, x as usize, c) as f64
        }
    };

    let mut out = Vec::with_capacity(patch_size * patch_size * 3);
    for r in 0..patch_size {
        for c in 0..patch_size {
            // Continuous position of this output pixel's center, shifted so that
            // source pixel centers sit on integers.
            let sy = top + (r as f64 + 0.5) * pixel - 0.5;
            let sx = left + (c as f64 + 0.5) * pixel - 0.5;
            let (y0, x0) = (sy.floor() as i64, sx.floor() as i64);
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for ch in 0..3 {
                let v = read(y0, x0, ch) * (1.0 - fy) * (1.0 - fx)
                    + read(y0, x0 + 1, ch) * (1.0 - fy) * fx
                    + read(y0 + 1, x0, ch) * fy * (1.0 - fx)
                    + read(y0 + 1, x0 + 1, ch) * fy * fx;
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(out)
}
