//! Iterative encoder on shuffled groups of grid tiles against a one-shot
//! ViT baseline on the same tiles.
//!
//! `cargo run --release --example shuffled_vit -- [key=value ...]`

use foveate::cli::parse_config;
use foveate::pipeline::{build_datasets, shuffled_vit_experiment, Run};

const DESK: &[&str] = &[
    "dataset.canvas=0",
    "dataset.train_size=2000",
    "dataset.val_size=500",
    "dataset.grid_size=64",
    "model.layers=2",
    "model.dim=32",
    "model.heads=2",
    "model.patch_size=16",
    "model.patch_count=4",
    "model.pos_hidden=32",
    "model.head_hidden=64",
    "groups=4",
    "epochs=4",
    "mixup_alpha=0",
    "eval_every=0",
];

fn percent(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{:5.1}", x * 100.0))
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut overrides: Vec<String> = DESK.iter().map(|s| s.to_string()).collect();
    overrides.extend(std::env::args().skip(1));
    let config = parse_config(None, &overrides)?;
    let data = build_datasets(&config.dataset, config.seed)?;
    let mut run = Run::new(config, "shuffled_vit")?;
    let out = shuffled_vit_experiment(&mut run, &data)?;
    println!(
        "iterative, top-1 after each group [{}]",
        percent(&out.iterative.val.top1)
    );
    println!(
        "baseline, all tiles at once       [{}]",
        percent(&out.baseline.val.top1)
    );
    Ok(())
}
