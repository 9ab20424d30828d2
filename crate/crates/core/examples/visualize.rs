//! Figures: the gaze path of a model over one cluttered canvas, and the
//! same grid cell of a large image and of its downscaled copy.
//!
//! `cargo run --release --example visualize -- [model.fve] [key=value ...]`
//!
//! The checkpoint must match the model keys given (an untrained model is
//! drawn when none is passed).

use foveate::cli::{parse_config, viz_gaze, viz_shift};
use foveate::data::synth::smooth_image;
use foveate::data::write_ppm;
use foveate::model::load_checkpoint;
use foveate::pipeline::{build_datasets, init_model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    let from = match args.first() {
        Some(a) if a.ends_with(".fve") => Some(args.remove(0)),
        _ => None,
    };
    let out = std::path::PathBuf::from("visualize_out");
    std::fs::create_dir_all(&out)?;

    let mut overrides = vec![
        "dataset.train_size=10".to_string(),
        "dataset.val_size=10".into(),
    ];
    overrides.extend(args);
    let config = parse_config(None, &overrides)?;
    let mut model = init_model(&config)?;
    if let Some(path) = &from {
        load_checkpoint(path)?.restore(&mut model.store, &[])?;
    }
    let data = build_datasets(&config.dataset, config.seed)?;
    let image = &data.val.images[0];
    let overlay = viz_gaze(&model, image, config.episode_len)?;
    for (t, c) in overlay.centers.iter().enumerate() {
        println!("step {}: ({:.3}, {:.3})", t + 1, c.x(), c.y());
    }
    write_ppm(image, out.join("canvas.ppm"))?;
    write_ppm(&overlay.render(image), out.join("gaze.ppm"))?;
    std::fs::write(out.join("gaze.svg"), overlay.svg(Some("canvas.ppm")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let large = smooth_image(&mut rng, 576, 576);
    write_ppm(&viz_shift(&large, 32, 96)?, out.join("shift.ppm"))?;
    println!("wrote {}", out.display());
    Ok(())
}
