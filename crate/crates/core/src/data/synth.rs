//! Procedural datasets: stroke-rendered digits, cluttered canvases built from
//! them, and smooth random "natural-ish" images.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{LabeledDataset, Split};
use crate::patchify::Image;

pub const DIGIT_SIDE: usize = 28;

/// Polylines of each glyph in a unit box, y pointing down.
fn glyph(digit: usize) -> Vec<Vec<(f64, f64)>> {
    let circle = |cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64| -> Vec<(f64, f64)> {
        (0..=20)
            .map(|i| {
                let t = from + (to - from) * i as f64 / 20.0;
                (cx + rx * t.cos(), cy + ry * t.sin())
            })
            .collect()
    };
    use std::f64::consts::PI;
    match digit {
        0 => vec![circle(0.5, 0.5, 0.27, 0.4, 0.0, 2.0 * PI)],
        1 => vec![vec![(0.33, 0.25), (0.52, 0.1), (0.52, 0.9)]],
        2 => vec![vec![
            (0.22, 0.28),
            (0.32, 0.13),
            (0.5, 0.08),
            (0.7, 0.13),
            (0.77, 0.3),
            (0.68, 0.47),
            (0.22, 0.9),
            (0.8, 0.9),
        ]],
        3 => vec![vec![
            (0.22, 0.12),
            (0.75, 0.12),
            (0.45, 0.44),
            (0.68, 0.52),
            (0.77, 0.72),
            (0.6, 0.9),
            (0.22, 0.86),
        ]],
        4 => vec![vec![(0.66, 0.9), (0.66, 0.1), (0.16, 0.64), (0.84, 0.64)]],
        5 => vec![vec![
            (0.77, 0.1),
            (0.3, 0.1),
            (0.26, 0.45),
            (0.56, 0.4),
            (0.76, 0.54),
            (0.76, 0.76),
            (0.56, 0.9),
            (0.22, 0.85),
        ]],
        6 => vec![
            vec![(0.7, 0.1), (0.45, 0.22), (0.3, 0.45), (0.27, 0.68)],
            circle(0.5, 0.69, 0.23, 0.2, 0.0, 2.0 * PI),
        ],
        7 => vec![vec![(0.2, 0.1), (0.8, 0.1), (0.62, 0.45), (0.42, 0.9)]],
        8 => vec![
            circle(0.5, 0.29, 0.19, 0.19, 0.0, 2.0 * PI),
            circle(0.5, 0.7, 0.24, 0.2, 0.0, 2.0 * PI),
        ],
        9 => vec![
            circle(0.5, 0.32, 0.23, 0.21, 0.0, 2.0 * PI),
            vec![(0.72, 0.32), (0.68, 0.6), (0.55, 0.9)],
        ],
        _ => panic!("digit {digit} out of range"),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Renders one handwritten-looking digit on a black `28×28` grid with a
/// random affine jitter, stroke width and ink intensity.
pub fn render_digit<R: Rng>(digit: usize, rng: &mut R) -> Vec<f32> {
    let side = DIGIT_SIDE as f64;
    let scale = rng.gen_range(17.0..22.0);
    let angle: f64 = rng.gen_range(-0.25..0.25);
    let shear: f64 = rng.gen_range(-0.25..0.25);
    let (tx, ty) = (rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
    let width = rng.gen_range(2.4..3.4);
    let ink: f64 = rng.gen_range(0.75..1.0);
    let (cos, sin) = (angle.cos(), angle.sin());
    let map = |(x, y): (f64, f64)| {
        let (u, v) = ((x - 0.5) * scale, (y - 0.5) * scale);
        let u = u + shear * v;
        (
            side / 2.0 + tx + cos * u - sin * v,
            side / 2.0 + ty + sin * u + cos * v,
        )
    };
    let segments: Vec<((f64, f64), (f64, f64))> = glyph(digit)
        .into_iter()
        .flat_map(|line| {
            let pts: Vec<_> = line.into_iter().map(map).collect();
            pts.windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>()
        })
        .collect();
    let mut out = vec![0f32; DIGIT_SIDE * DIGIT_SIDE];
    for y in 0..DIGIT_SIDE {
        for x in 0..DIGIT_SIDE {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let d = segments
                .iter()
                .map(|&(a, b)| segment_distance(p, a, b))
                .fold(f64::MAX, f64::min);
            let v = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0) * ink;
            out[y * DIGIT_SIDE + x] = v as f32;
        }
    }
    out
}

/// Balanced set of procedurally rendered `28×28` digits (classes 0..9).
pub fn synth_digits<R: Rng>(count: usize, rng: &mut R, split: Split) -> LabeledDataset {
    let mut labels: Vec<usize> = (0..count).map(|i| i % 10).collect();
    labels.shuffle(rng);
    let images = labels
        .iter()
        .map(|&d| {
            Image::from_gray(DIGIT_SIDE, DIGIT_SIDE, &render_digit(d, rng)).expect("28x28 glyph")
        })
        .collect();
    LabeledDataset::new(images, labels, 10, split).expect("consistent")
}

/// Where the true digit went on a cluttered canvas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

/// A black `canvas×canvas` image holding one full digit from `source` at a
/// uniformly random position plus `distractors` random `8×8` fragments of
/// other digits. Returns the image, the digit's label and its placement.
pub fn synth_cluttered<R: Rng>(
    rng: &mut R,
    canvas: usize,
    source: &LabeledDataset,
    distractors: usize,
) -> (Image, usize, Placement) {
    let idx = rng.gen_range(0..source.len());
    synth_cluttered_with(rng, canvas, source, idx, distractors, None)
}

/// As [`synth_cluttered`] with a chosen source digit and, optionally, a fixed
/// top-left corner for it.
pub fn synth_cluttered_with<R: Rng>(
    rng: &mut R,
    canvas: usize,
    source: &LabeledDataset,
    index: usize,
    distractors: usize,
    at: Option<(usize, usize)>,
) -> (Image, usize, Placement) {
    let digit = &source.images[index];
    let side = digit.height().max(digit.width());
    assert!(canvas >= side, "canvas {canvas} smaller than source {side}");
    let mut img = Image::zeros(canvas, canvas);
    let paste_max = |img: &mut Image,
                     src: &Image,
                     sy: usize,
                     sx: usize,
                     h: usize,
                     w: usize,
                     top: usize,
                     left: usize| {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = src.get(sy + y, sx + x, c);
                    if v > img.get(top + y, left + x, c) {
                        img.set(top + y, left + x, c, v);
                    }
                }
            }
        }
    };
    const FRAG: usize = 8;
    for _ in 0..distractors {
        if source.len() < 2 {
            break;
        }
        let mut other = rng.gen_range(0..source.len() - 1);
        if other >= index {
            other += 1;
        }
        let src = &source.images[other];
        let frag = FRAG.min(src.height()).min(src.width());
        let sy = rng.gen_range(0..=src.height() - frag);
        let sx = rng.gen_range(0..=src.width() - frag);
        let top = rng.gen_range(0..=canvas - frag);
        let left = rng.gen_range(0..=canvas - frag);
        paste_max(&mut img, src, sy, sx, frag, frag, top, left);
    }
    let (top, left) = at.unwrap_or_else(|| {
        (
            rng.gen_range(0..=canvas - digit.height()),
            rng.gen_range(0..=canvas - digit.width()),
        )
    });
    paste_max(
        &mut img,
        digit,
        0,
        0,
        digit.height(),
        digit.width(),
        top,
        left,
    );
    (img, source.labels[index], Placement { top, left, side })
}

/// Cluttered dataset of `count` canvases drawn from `source`.
pub fn cluttered_dataset<R: Rng>(
    rng: &mut R,
    count: usize,
    canvas: usize,
    source: &LabeledDataset,
    distractors: usize,
    split: Split,
) -> LabeledDataset {
    let (images, labels) = (0..count)
        .map(|_| {
            let (img, label, _) = synth_cluttered(rng, canvas, source, distractors);
            (img, label)
        })
        .unzip();
    LabeledDataset::new(images, labels, source.classes, split).expect("consistent")
}

/// Smooth random RGB image: a sum of a few random low-frequency sinusoids and
/// Gaussian blobs, rescaled into `[0,1]`.
pub fn smooth_image<R: Rng>(rng: &mut R, height: usize, width: usize) -> Image {
    struct Wave {
        fx: f64,
        fy: f64,
        phase: f64,
        amp: [f64; 3],
    }
    struct Blob {
        cx: f64,
        cy: f64,
        r: f64,
        amp: [f64; 3],
    }
    let amp = |rng: &mut R| {
        [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ]
    };
    let waves: Vec<Wave> = (0..4)
        .map(|_| Wave {
            fx: rng.gen_range(0.5..3.0),
            fy: rng.gen_range(0.5..3.0),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            amp: amp(rng),
        })
        .collect();
    let blobs: Vec<Blob> = (0..5)
        .map(|_| Blob {
            cx: rng.gen(),
            cy: rng.gen(),
            r: rng.gen_range(0.08..0.3),
            amp: amp(rng),
        })
        .collect();
    let mut raw = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = (
                (x as f64 + 0.5) / width as f64,
                (y as f64 + 0.5) / height as f64,
            );
            let mut px = [0.0; 3];
            for w in &waves {
                let s = (std::f64::consts::TAU * (w.fx * u + w.fy * v) + w.phase).sin();
                for c in 0..3 {
                    px[c] += 0.5 * w.amp[c] * s;
                }
            }
            for b in &blobs {
                let d2 = (u - b.cx).powi(2) + (v - b.cy).powi(2);
                let g = (-d2 / (2.0 * b.r * b.r)).exp();
                for c in 0..3 {
                    px[c] += b.amp[c] * g;
                }
            }
            raw.extend(px);
        }
    }
    let (lo, hi) = raw
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-9);
    let pixels = raw.iter().map(|&v| ((v - lo) / span) as f32).collect();
    Image::new(height, width, pixels).expect("sized")
}
