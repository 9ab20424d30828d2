use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::new(h, w, (0..h * w * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

#[test]
fn crop_size_examples() {
    assert_eq!(crop_size(256, 256, 0.0).unwrap(), 256.0);
    assert_eq!(crop_size(2000, 1000, 2.0).unwrap(), 250.0);
    assert_eq!(crop_size(256, 256, 4.0).unwrap(), 16.0);
    assert_eq!(crop_size(8, 8, -0.5), Err(PatchError::NegativeZoom(-0.5)));
}

#[test]
fn zoom_schedule_examples() {
    assert_eq!(
        ZoomSchedule::new(5, 4.0).unwrap().zs(),
        &[0.0, 1.0, 2.0, 3.0, 4.0]
    );
    assert_eq!(ZoomSchedule::new(1, 4.0).unwrap().zs(), &[0.0]);
    let s = ZoomSchedule::new(16, 4.0).unwrap();
    assert_eq!(s.zs()[0], 0.0);
    assert_eq!(s.zs()[15], 4.0);
    for (i, w) in s.zs().windows(2).enumerate() {
        assert!((w[1] - w[0] - 4.0 / 15.0).abs() < 1e-12, "step {i}");
    }
    assert_eq!(ZoomSchedule::new(0, 4.0), Err(PatchError::EmptySchedule));
    assert_eq!(
        ZoomSchedule::new(3, 0.0).unwrap().normalized(),
        vec![0.0; 3]
    );
    assert_eq!(s.normalized()[15], 1.0);
}

#[test]
fn gaze_center_clamps() {
    let c = GazeCenter::new(-0.2, 1.7);
    assert_eq!((c.x(), c.y()), (0.0, 1.0));
}

#[test]
fn identity_resampling_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = random_image(&mut rng, 16, 16);
    let c = GazeCenter::new(0.5, 0.5);
    let fast = extract_patch(&img, c, 0.0, 16).unwrap();
    assert_eq!(fast, img.pixels());
    assert_eq!(bilinear_oracle(&img, c, 0.0, 16).unwrap(), img.pixels());
}

#[test]
fn corner_center_pads_three_quadrants() {
    let img = Image::filled(16, 16, 0.6);
    let c = GazeCenter::new(0.0, 0.0);
    for patch in [
        extract_patch(&img, c, 0.0, 16).unwrap(),
        bilinear_oracle(&img, c, 0.0, 16).unwrap(),
    ] {
        for r in 0..16 {
            for col in 0..16 {
                let v = patch[(r * 16 + col) * 3];
                if r >= 8 && col >= 8 {
                    assert_eq!(v, 0.6, "({r},{col})");
                } else {
                    assert_eq!(v, 0.0, "({r},{col})");
                }
            }
        }
    }
}

#[test]
fn odd_sized_image_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let img = random_image(&mut rng, 97, 61);
    let c = GazeCenter::new(0.3, 0.7);
    let fast = extract_patch(&img, c, 1.5, 16).unwrap();
    let slow = bilinear_oracle(&img, c, 1.5, 16).unwrap();
    assert!(max_abs_diff(&fast, &slow) <= 1e-5);
}

#[test]
fn sub_pixel_crops_are_allowed() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let img = random_image(&mut rng, 20, 20);
    // C = 20 / 2^9, far below one pixel
    let p = extract_patch(&img, GazeCenter::new(0.51, 0.49), 9.0, 8).unwrap();
    let (lo, hi) = p.chunks(3).fold((f32::MAX, f32::MIN), |(lo, hi), px| {
        (lo.min(px[0]), hi.max(px[0]))
    });
    assert!(
        hi - lo < 0.05,
        "near-constant patch expected, spread {}",
        hi - lo
    );
}

#[test]
fn multizoom_whole_image_and_last_patch() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let img = random_image(&mut rng, 32, 32);
    let c = GazeCenter::new(0.5, 0.5);
    let single = extract_multizoom(&img, c, 8, &ZoomSchedule::new(1, 0.0).unwrap()).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single.patch(0), extract_patch(&img, c, 0.0, 8).unwrap());

    let sched = ZoomSchedule::new(6, 3.3).unwrap();
    let c = GazeCenter::new(0.2, 0.9);
    let set = extract_multizoom(&img, c, 8, &sched).unwrap();
    assert_eq!(set.patch(5), extract_patch(&img, c, 3.3, 8).unwrap());
    assert_eq!(set.z_norm(), sched.normalized());
}

#[test]
fn batch_extraction_equals_sequential_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let images: Vec<Image> = (0..6)
        .map(|i| random_image(&mut rng, 20 + i * 7, 31 - i))
        .collect();
    let centers: Vec<GazeCenter> = (0..6)
        .map(|_| GazeCenter::new(rng.gen(), rng.gen()))
        .collect();
    let sched = ZoomSchedule::new(4, 2.0).unwrap();
    let batch = extract_multizoom_batch(&images, &centers, 8, &sched).unwrap();
    for ((img, &c), got) in images.iter().zip(&centers).zip(&batch) {
        assert_eq!(got, &extract_multizoom(img, c, 8, &sched).unwrap());
    }
}

#[test]
fn vit_grid_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let img = random_image(&mut rng, 256, 256);
    assert_eq!(extract_vit_grid(&img, 16).unwrap().len(), 256);

    let small = random_image(&mut rng, 16, 16);
    let tiles = extract_vit_grid(&small, 16).unwrap();
    assert_eq!(tiles.len(), 1);
    assert_eq!(tiles[0].pixels, small.pixels());

    let rect = random_image(&mut rng, 48, 32);
    let tiles = extract_vit_grid(&rect, 16).unwrap();
    assert_eq!((tiles[1].row, tiles[1].col), (0, 1));
    assert_eq!(assemble_grid(&tiles, 3, 2, 16), rect);

    assert!(matches!(
        extract_vit_grid(&rect, 10),
        Err(PatchError::Indivisible { .. })
    ));
}

#[test]
fn resize_to_same_size_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let img = random_image(&mut rng, 9, 13);
    assert_eq!(img.resize_bilinear(9, 13), img);
}

fn arb_case() -> impl Strategy<Value = (u64, usize, usize, f64, f64, f64, usize)> {
    (
        any::<u64>(),
        1usize..60,
        1usize..60,
        0.0f64..1.0,
        0.0f64..1.0,
        0.0f64..5.0,
        1usize..20,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn fast_path_matches_oracle((seed, h, w, x, y, z, p) in arb_case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, h, w);
        let c = GazeCenter::new(x, y);
        let fast = extract_patch(&img, c, z, p).unwrap();
        let slow = bilinear_oracle(&img, c, z, p).unwrap();
        prop_assert!(max_abs_diff(&fast, &slow) <= 1e-5);
        prop_assert!(fast.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn samples_without_support_are_zero((seed, h, w, x, y, z, p) in arb_case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, h, w);
        let c = GazeCenter::new(x, y);
        let patch = extract_patch(&img, c, z, p).unwrap();
        let side = crop_size(h, w, z).unwrap();
        let pix = side / p as f64;
        for r in 0..p {
            for col in 0..p {
                let sy = y * h as f64 - side / 2.0 + (r as f64 + 0.5) * pix - 0.5;
                let sx = x * w as f64 - side / 2.0 + (col as f64 + 0.5) * pix - 0.5;
                let outside = sy <= -1.0 || sx <= -1.0 || sy >= h as f64 || sx >= w as f64;
                if outside {
                    let o = (r * p + col) * 3;
                    prop_assert_eq!(&patch[o..o + 3], &[0.0, 0.0, 0.0]);
                }
            }
        }
    }
}
