//! Multi-zoom patches around one gaze center of a cluttered digit.
//!
//! `cargo run --release --example patchify -- [out_dir] [x] [y]`

use foveate::data::synth::{synth_cluttered, synth_digits};
use foveate::data::{write_ppm, Split};
use foveate::patchify::{crop_size, extract_multizoom, GazeCenter, Image, ZoomSchedule};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = std::path::PathBuf::from(args.first().map_or("patchify_out", String::as_str));
    let x: f64 = args.get(1).map_or(Ok(0.5), |s| s.parse())?;
    let y: f64 = args.get(2).map_or(Ok(0.5), |s| s.parse())?;
    std::fs::create_dir_all(&out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let digits = synth_digits(16, &mut rng, Split::Train);
    let (image, label, at) = synth_cluttered(&mut rng, 128, &digits, 8);
    println!(
        "digit {label} at ({}, {}), side {}",
        at.left, at.top, at.side
    );
    write_ppm(&image, out.join("image.ppm"))?;

    let (p, schedule) = (16, ZoomSchedule::new(4, 3.0)?);
    let set = extract_multizoom(&image, GazeCenter::new(x, y), p, &schedule)?;
    for (i, &z) in schedule.zs().iter().enumerate() {
        let side = crop_size(image.height(), image.width(), z)?;
        let patch = Image::new(p, p, set.patch(i).to_vec())?;
        write_ppm(&patch, out.join(format!("patch-{i}.ppm")))?;
        println!("zoom {z:.2}: {side:.1}px crop -> {p}x{p}");
    }
    println!("wrote {}", out.display());
    Ok(())
}
