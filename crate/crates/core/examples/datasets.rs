//! The data layer: procedural digits, cluttered canvases, an IDX round trip
//! and one MixUp batch.
//!
//! `cargo run --release --example datasets -- [out_dir]`

use foveate::data::synth::{cluttered_dataset, synth_digits};
use foveate::data::{load_idx, mixup, one_hot, write_idx, write_ppm, Split};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or("datasets_out".into()));
    std::fs::create_dir_all(&out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let digits = synth_digits(200, &mut rng, Split::Train);
    let mut counts = [0usize; 10];
    digits.labels.iter().for_each(|&l| counts[l] += 1);
    println!("{} digits, per class {counts:?}", digits.len());

    let canvases = cluttered_dataset(&mut rng, 8, 64, &digits, 6, Split::Train);
    for (i, img) in canvases.images.iter().enumerate() {
        write_ppm(
            img,
            out.join(format!("cluttered-{i}-label{}.ppm", canvases.labels[i])),
        )?;
    }

    let (images, labels) = (out.join("digits-images.idx"), out.join("digits-labels.idx"));
    write_idx(&digits, &images, &labels)?;
    let back = load_idx(&images, &labels, Split::Train)?;
    let max_err = digits
        .images
        .iter()
        .zip(&back.images)
        .flat_map(|(a, b)| {
            a.pixels()
                .iter()
                .zip(b.pixels())
                .map(|(x, y)| (x - y).abs())
        })
        .fold(0.0f32, f32::max);
    println!(
        "IDX round trip: labels equal {}, max pixel error {max_err:.4}",
        back.labels == digits.labels
    );

    let targets: Vec<Vec<f32>> = canvases.labels.iter().map(|&l| one_hot(l, 10)).collect();
    let mixed = mixup(&canvases.images, &targets, 0.8, &mut rng)?;
    write_ppm(&mixed.images[0], out.join("mixup-0.ppm"))?;
    println!(
        "MixUp lambda {:.3}, first target {:?}",
        mixed.lambda, mixed.targets[0]
    );
    println!("wrote {}", out.display());
    Ok(())
}
