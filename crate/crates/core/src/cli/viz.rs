//! Static figures: gaze-trajectory overlays (PPM and SVG) and the ViT-grid
//! distribution-shift comparison.

use std::fmt::Write;

use super::CliError;
use crate::patchify::{crop_size, GazeCenter, Image, ZoomSchedule};
use crate::pipeline::{gaze_trajectory, Model};

const PALETTE: [[f32; 3]; 8] = [
    [1.0, 0.2, 0.2],
    [0.2, 0.9, 0.2],
    [0.3, 0.5, 1.0],
    [1.0, 0.85, 0.1],
    [1.0, 0.3, 1.0],
    [0.1, 0.9, 0.9],
    [1.0, 0.6, 0.2],
    [1.0, 1.0, 1.0],
];

// 3x5 bitmaps, one row per entry, high bit on the left.
const GLYPHS: [[u8; 5]; 10] = [
    [7, 5, 5, 5, 7],
    [2, 6, 2, 2, 7],
    [7, 1, 7, 4, 7],
    [7, 1, 7, 1, 7],
    [5, 5, 7, 1, 1],
    [7, 4, 7, 1, 7],
    [7, 4, 7, 5, 7],
    [7, 1, 1, 1, 1],
    [7, 5, 7, 5, 7],
    [7, 5, 7, 1, 7],
];

/// One zoom extent of one step, in relative image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZoomSquare {
    pub step: usize,
    pub center: GazeCenter,
    /// Side as fractions of the image width and height.
    pub width: f64,
    pub height: f64,
}

/// Numbered gaze centers with the zoom extents of every glimpse.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeOverlay {
    pub height: usize,
    pub width: usize,
    pub centers: Vec<GazeCenter>,
    pub squares: Vec<ZoomSquare>,
}

impl GazeOverlay {
    pub fn new(
        height: usize,
        width: usize,
        centers: &[GazeCenter],
        schedule: &ZoomSchedule,
    ) -> Result<Self, CliError> {
        let fig = |e: crate::patchify::PatchError| CliError::Figure(e.to_string());
        let mut squares = Vec::new();
        for (step, &center) in centers.iter().enumerate() {
            for &z in schedule.zs() {
                let side = crop_size(height, width, z).map_err(fig)?;
                squares.push(ZoomSquare {
                    step,
                    center,
                    width: side / width as f64,
                    height: side / height as f64,
                });
            }
        }
        Ok(Self {
            height,
            width,
            centers: centers.to_vec(),
            squares,
        })
    }

    /// The image with square outlines and numbered markers drawn on top.
    pub fn render(&self, image: &Image) -> Image {
        let mut out = image.clone();
        let (h, w) = (out.height() as f64, out.width() as f64);
        for sq in &self.squares {
            let color = PALETTE[sq.step % PALETTE.len()];
            let (cx, cy) = (sq.center.x() * w, sq.center.y() * h);
            let (hw, hh) = (sq.width * w / 2.0, sq.height * h / 2.0);
            outline(&mut out, cy - hh, cx - hw, cy + hh, cx + hw, color);
        }
        let scale = (out.height().min(out.width()) / 64).max(1);
        for (step, c) in self.centers.iter().enumerate() {
            let color = PALETTE[step % PALETTE.len()];
            let (cx, cy) = (c.x() * w, c.y() * h);
            fill(&mut out, cy - 1.0, cx - 1.0, cy + 1.0, cx + 1.0, color);
            label(
                &mut out,
                step + 1,
                cy as i64 + 2,
                cx as i64 + 2,
                scale,
                color,
            );
        }
        out
    }

    /// SVG with the same geometry; `href` optionally embeds a background image.
    pub fn svg(&self, href: Option<&str>) -> String {
        let (w, h) = (self.width as f64, self.height as f64);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
            self.width, self.height, self.width, self.height
        );
        if let Some(href) = href {
            let _ = writeln!(
                s,
                r#"<image href="{href}" x="0" y="0" width="{}" height="{}"/>"#,
                self.width, self.height
            );
        }
        for sq in &self.squares {
            let (sw, sh) = (sq.width * w, sq.height * h);
            let _ = writeln!(
                s,
                r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="none" stroke="{}"/>"#,
                sq.center.x() * w - sw / 2.0,
                sq.center.y() * h - sh / 2.0,
                sw,
                sh,
                hex(PALETTE[sq.step % PALETTE.len()])
            );
        }
        for (step, c) in self.centers.iter().enumerate() {
            let color = hex(PALETTE[step % PALETTE.len()]);
            let (x, y) = (c.x() * w, c.y() * h);
            let _ = writeln!(
                s,
                r#"<circle cx="{x:.3}" cy="{y:.3}" r="2" fill="{color}"/>"#
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.3}" y="{:.3}" font-size="10" fill="{color}">{}</text>"#,
                x + 3.0,
                y - 3.0,
                step + 1
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn hex(c: [f32; 3]) -> String {
    let b = |v: f32| (v * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", b(c[0]), b(c[1]), b(c[2]))
}

fn put(img: &mut Image, y: i64, x: i64, color: [f32; 3]) {
    if y >= 0 && x >= 0 && (y as usize) < img.height() && (x as usize) < img.width() {
        for (ch, &v) in color.iter().enumerate() {
            img.set(y as usize, x as usize, ch, v);
        }
    }
}

fn outline(img: &mut Image, y0: f64, x0: f64, y1: f64, x1: f64, color: [f32; 3]) {
    let (y0, x0, y1, x1) = (
        y0.round() as i64,
        x0.round() as i64,
        y1.round() as i64 - 1,
        x1.round() as i64 - 1,
    );
    for x in x0..=x1 {
        put(img, y0, x, color);
        put(img, y1, x, color);
    }
    for y in y0..=y1 {
        put(img, y, x0, color);
        put(img, y, x1, color);
    }
}

fn fill(img: &mut Image, y0: f64, x0: f64, y1: f64, x1: f64, color: [f32; 3]) {
    for y in y0.round() as i64..=y1.round() as i64 {
        for x in x0.round() as i64..=x1.round() as i64 {
            put(img, y, x, color);
        }
    }
}

fn label(img: &mut Image, n: usize, top: i64, left: i64, scale: usize, color: [f32; 3]) {
    let s = scale as i64;
    for (i, d) in n.to_string().bytes().enumerate() {
        let glyph = GLYPHS[(d - b'0') as usize];
        let ox = left + i as i64 * 4 * s;
        for (r, bits) in glyph.iter().enumerate() {
            for c in 0..3 {
                if bits >> (2 - c) & 1 == 1 {
                    for dy in 0..s {
                        for dx in 0..s {
                            put(img, top + r as i64 * s + dy, ox + c as i64 * s + dx, color);
                        }
                    }
                }
            }
        }
    }
}

/// The learned policy's deterministic trajectory over `steps` glimpses of
/// `image`, as an overlay.
pub fn viz_gaze(model: &Model, image: &Image, steps: usize) -> Result<GazeOverlay, CliError> {
    let cfg = model.encoder.config();
    let schedule = ZoomSchedule::new(cfg.patch_count, cfg.max_zoom)
        .map_err(|e| CliError::Figure(e.to_string()))?;
    let centers = gaze_trajectory(model, image, steps)?;
    GazeOverlay::new(image.height(), image.width(), &centers, &schedule)
}

/// Width of the white bar between the two patches of [`viz_shift`].
pub const SHIFT_SEPARATOR: usize = 2;

/// The same `P×P` grid cell (the one holding the image center) taken from
/// `image` and from a copy resized so its short side is `small_size`, side
/// by side: `P` rows, `2P + SHIFT_SEPARATOR` columns.
pub fn viz_shift(image: &Image, patch_size: usize, small_size: usize) -> Result<Image, CliError> {
    let short = image.height().min(image.width());
    if patch_size == 0 || small_size < patch_size || small_size > short {
        return Err(CliError::Figure(format!(
            "need 0 < P ({patch_size}) <= small size ({small_size}) <= image short side ({short})"
        )));
    }
    let resize = |side: usize| (side * small_size + short / 2) / short;
    let small = image.resize_bilinear(resize(image.height()), resize(image.width()));
    let row = small.height() / patch_size / 2;
    let col = small.width() / patch_size / 2;
    let (top, left) = (row * patch_size, col * patch_size);
    let a = image.crop(top, left, patch_size, patch_size);
    let b = small.crop(top, left, patch_size, patch_size);
    let width = 2 * patch_size + SHIFT_SEPARATOR;
    let mut out = Image::filled(patch_size, width, 1.0);
    for y in 0..patch_size {
        for x in 0..patch_size {
            for ch in 0..3 {
                out.set(y, x, ch, a.get(y, x, ch));
                out.set(y, x + patch_size + SHIFT_SEPARATOR, ch, b.get(y, x, ch));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::encode_ppm;
    use crate::data::synth::smooth_image;

    #[test]
    fn square_extents_follow_crop_size() {
        let schedule = ZoomSchedule::new(3, 2.0).unwrap();
        let c = [GazeCenter::new(0.5, 0.5)];
        let o = GazeOverlay::new(40, 80, &c, &schedule).unwrap();
        assert_eq!(o.squares.len(), 3);
        for (sq, z) in o.squares.iter().zip([0.0, 1.0, 2.0]) {
            let side = crop_size(40, 80, z).unwrap();
            assert!((sq.width - side / 80.0).abs() < 1e-12);
            assert!((sq.height - side / 40.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_step_gives_one_marker() {
        let schedule = ZoomSchedule::new(2, 1.0).unwrap();
        let o = GazeOverlay::new(32, 32, &[GazeCenter::new(0.25, 0.75)], &schedule).unwrap();
        let svg = o.svg(None);
        assert_eq!(svg.matches("<circle").count(), 1);
        assert_eq!(svg.matches("<rect").count(), 2);
        assert!(svg.contains(">1</text>"));
        let img = Image::zeros(32, 32);
        let drawn = o.render(&img);
        assert_eq!(drawn.get(24, 8, 0), PALETTE[0][0]);
    }

    #[test]
    fn gaze_from_model_is_reproducible() {
        let config = crate::pipeline::RunConfig {
            model: crate::model::EncoderConfig {
                layers: 1,
                dim: 16,
                heads: 2,
                state_size: 2,
                patch_size: 4,
                patch_count: 2,
                pos_hidden: 8,
                head_hidden: 16,
                ..Default::default()
            },
            ..Default::default()
        };
        let model = crate::pipeline::init_model(&config).unwrap();
        let img = smooth_image(&mut ChaCha8Rng::seed_from_u64(4), 30, 20);
        let a = viz_gaze(&model, &img, 1).unwrap();
        assert_eq!(a.centers.len(), 1);
        assert_eq!(a.squares.len(), 2);
        let b = viz_gaze(&model, &img, 3).unwrap();
        assert_eq!(b.centers[0], a.centers[0]);
        assert_eq!(
            encode_ppm(&b.render(&img)),
            encode_ppm(&viz_gaze(&model, &img, 3).unwrap().render(&img))
        );
    }

    #[test]
    fn rendering_is_deterministic() {
        let img = smooth_image(&mut ChaCha8Rng::seed_from_u64(3), 48, 48);
        let schedule = ZoomSchedule::new(3, 2.0).unwrap();
        let c = [GazeCenter::new(0.3, 0.6), GazeCenter::new(0.7, 0.2)];
        let a = GazeOverlay::new(48, 48, &c, &schedule).unwrap();
        let b = GazeOverlay::new(48, 48, &c, &schedule).unwrap();
        assert_eq!(encode_ppm(&a.render(&img)), encode_ppm(&b.render(&img)));
        assert_eq!(a.svg(Some("x.ppm")), b.svg(Some("x.ppm")));
    }

    #[test]
    fn shift_layout() {
        let img = smooth_image(&mut ChaCha8Rng::seed_from_u64(1), 64, 64);
        let out = viz_shift(&img, 8, 32).unwrap();
        assert_eq!((out.height(), out.width()), (8, 2 * 8 + SHIFT_SEPARATOR));
    }

    #[test]
    fn same_size_resize_gives_identical_patches() {
        let img = smooth_image(&mut ChaCha8Rng::seed_from_u64(2), 48, 40);
        let out = viz_shift(&img, 8, 40).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                for ch in 0..3 {
                    assert_eq!(out.get(y, x, ch), out.get(y, x + 8 + SHIFT_SEPARATOR, ch));
                }
            }
        }
    }

    #[test]
    fn large_image_sizes_are_accepted() {
        let img = Image::filled(2880, 2880, 0.5);
        let out = viz_shift(&img, 32, 288).unwrap();
        assert_eq!((out.height(), out.width()), (32, 64 + SHIFT_SEPARATOR));
        assert!(viz_shift(&img, 32, 4000).is_err());
        assert!(viz_shift(&img, 32, 16).is_err());
    }
}
