//! Stage 1 followed by stage 2: GRPO training of the gaze policy on a
//! frozen encoder, then learned against random gaze, step by step.
//!
//! `cargo run --release --example train_policy -- [stage1.fve] [key=value ...]`
//!
//! Without a checkpoint the encoder is pretrained first.

use foveate::cli::parse_config;
use foveate::model::load_checkpoint;
use foveate::pipeline::{build_datasets, init_model, pretrain_stage1, train_stage2, Run};

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
    "stage2.epochs=1",
    "stage2.batch_size=16",
    "stage2.group_size=8",
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
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    let from = match args.first() {
        Some(a) if a.ends_with(".fve") => Some(args.remove(0)),
        _ => None,
    };
    let mut overrides: Vec<String> = DESK.iter().map(|s| s.to_string()).collect();
    overrides.extend(args);
    let config = parse_config(None, &overrides)?;
    let data = build_datasets(&config.dataset, config.seed)?;
    let mut run = Run::new(config.clone(), "train_policy")?;

    let model = match from {
        Some(path) => {
            let mut model = init_model(&config)?;
            let n = load_checkpoint(&path)?.restore(&mut model.store, &["encoder."])?;
            println!("loaded {n} encoder tensors from {path}");
            model
        }
        None => {
            let out = pretrain_stage1(&mut run, &data)?;
            println!(
                "stage 1 done, random-gaze top-1 [{}]",
                percent(&out.val.top1)
            );
            out.model
        }
    };
    let out = train_stage2(&mut run, &data, model)?;
    println!("{} GRPO updates", out.outer_steps);
    println!("random  [{}]", percent(&out.random.top1));
    println!("learned [{}]", percent(&out.learned.top1));
    if let Some(dir) = run.output_dir() {
        println!("metrics and checkpoints in {}", dir.display());
    }
    Ok(())
}
