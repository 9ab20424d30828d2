//! Stage 1: supervised training of the encoder on cluttered digits with
//! uniformly random gaze, then accuracy per step for random and fixed gaze.
//!
//! `cargo run --release --example pretrain -- [key=value ...]`
//! (e.g. `epochs=20 output_dir=runs/pretrain`)

use foveate::cli::parse_config;
use foveate::patchify::GazeCenter;
use foveate::pipeline::{build_datasets, evaluate, pretrain_stage1, PolicyMode, Run};

const DESK: &[&str] = &[
    "dataset.canvas=36",
    "dataset.distractors=4",
    "dataset.train_size=2000",
    "dataset.val_size=500",
    "dataset.grid_size=48",
    "model.layers=2",
    "model.dim=32",
    "model.heads=2",
    "model.patch_size=12",
    "model.patch_count=3",
    "model.max_zoom=1.5",
    "model.pos_hidden=32",
    "model.head_hidden=64",
    "epochs=4",
    "batch_size=16",
    "base_lr=1e-3",
    "mixup_alpha=0",
    "eval_every=2",
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
    let mut run = Run::new(config.clone(), "pretrain")?;

    let out = pretrain_stage1(&mut run, &data)?;
    for r in &out.history {
        println!(
            "epoch {:>3} loss {:.3}  val top-1 [{}]",
            r.epoch,
            r.train_loss,
            percent(&r.val_top1)
        );
    }
    let n = config.episode_len;
    let random = evaluate(
        &out.model,
        &data.val,
        &PolicyMode::Random,
        n,
        1,
        config.eval_batch,
    )?;
    let center = PolicyMode::Fixed(vec![GazeCenter::new(0.5, 0.5)]);
    let fixed = evaluate(&out.model, &data.val, &center, n, 1, config.eval_batch)?;
    println!("random gaze   [{}]", percent(&random.top1));
    println!("always center [{}]", percent(&fixed.top1));
    if let Some(path) = run.save(&out.model.store, "stage1")? {
        println!("saved {}", path.display());
    }
    Ok(())
}
