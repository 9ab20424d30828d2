use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use foveate::cli::{load_checkpoint, parse_config, viz_gaze, viz_shift, CliError};
use foveate::data::{load_ppm, write_ppm};
use foveate::patchify::{extract_multizoom, GazeCenter, Image, ZoomSchedule};
use foveate::pipeline::{
    build_datasets, evaluate, init_model, pretrain_stage1, shuffled_vit_experiment, train_stage2,
    train_vit_baseline, Model, PolicyMode, Run, RunConfig, Stage, Summary,
};

#[derive(Parser)]
#[command(
    name = "foveate",
    version,
    about = "Multi-zoom glimpse encoder with a learned gaze policy"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file of dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.layers=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run seed. Falls back to FOVEATE_SEED, then to the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (sets `output_dir`).
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the multi-zoom patches of one glimpse as PPM files.
    Patchify {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        x: f64,
        #[arg(long, default_value_t = 0.5)]
        y: f64,
    },
    /// Stage 1: encoder and task head with random gaze.
    Pretrain,
    /// Shuffled grid-tile groups versus the full-attention baseline.
    ShuffledVit,
    /// Stage 2: GRPO on the policy with the encoder frozen.
    TrainPolicy {
        /// Stage-1 checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-step accuracy of random and learned gaze.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Full-attention ViT baseline on the grid tiles.
    Baseline,
    /// Overlay the learned gaze trajectory on one image.
    VizGaze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Number of steps (defaults to `episode_len`).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// The same grid cell from an image and its downsized copy.
    VizShift {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 32)]
        patch: usize,
        #[arg(long, default_value_t = 288)]
        small: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Patchify { .. } => "patchify",
            Self::Pretrain => "pretrain",
            Self::ShuffledVit => "shuffled-vit",
            Self::TrainPolicy { .. } => "train-policy",
            Self::Eval { .. } => "eval",
            Self::Baseline => "baseline",
            Self::VizGaze { .. } => "viz-gaze",
            Self::VizShift { .. } => "viz-shift",
        }
    }

    fn stage(&self) -> Option<Stage> {
        match self {
            Self::Pretrain => Some(Stage::Pretrain),
            Self::ShuffledVit => Some(Stage::ShuffledVit),
            Self::TrainPolicy { .. } => Some(Stage::TrainPolicy),
            Self::Eval { .. } => Some(Stage::Eval),
            Self::Baseline => Some(Stage::Baseline),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum Error {
    #[error(transparent)]
    Cli(#[from] CliError),
    #[error(transparent)]
    Pipeline(#[from] foveate::pipeline::PipelineError),
    #[error(transparent)]
    Data(#[from] foveate::data::DataError),
    #[error(transparent)]
    Patch(#[from] foveate::patchify::PatchError),
    #[error(transparent)]
    Checkpoint(#[from] foveate::model::CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

impl Error {
    fn kind(&self) -> &'static str {
        match self {
            Self::Cli(CliError::UnknownKey { .. }) => "unknown_key",
            Self::Cli(_) => "config",
            Self::Pipeline(_) => "pipeline",
            Self::Data(_) => "data",
            Self::Patch(_) => "patchify",
            Self::Checkpoint(_) => "checkpoint",
            Self::Io(_) => "io",
            Self::Usage(_) => "usage",
        }
    }
}

fn seed_in_file(path: &Path) -> bool {
    std::fs::read_to_string(path)
        .ok()
        .and_then(|t| t.parse::<toml::Table>().ok())
        .is_some_and(|t| t.contains_key("seed"))
}

fn effective_config(common: &Common, command: &Command) -> Result<RunConfig, Error> {
    let mut overrides = Vec::new();
    let seed_set = common
        .overrides
        .iter()
        .any(|o| o.trim_start().starts_with("seed="))
        || common.config.as_deref().is_some_and(seed_in_file);
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    } else if !seed_set {
        if let Ok(v) = std::env::var("FOVEATE_SEED") {
            let seed: u64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Usage(format!("FOVEATE_SEED `{v}` is not an integer")))?;
            overrides.push(format!("seed={seed}"));
        }
    }
    let mut all = common.overrides.clone();
    all.extend(overrides);
    let mut config = parse_config(common.config.as_deref(), &all)?;
    if let Some(stage) = command.stage() {
        config.stage = stage;
    }
    if let Some(dir) = &common.output {
        config.output_dir = Some(dir.clone());
    }
    if config.output_dir.is_none() {
        config.output_dir = Some(PathBuf::from("runs").join(command.name()));
    }
    Ok(config)
}

fn load_model(config: &RunConfig, path: &Path) -> Result<Model, Error> {
    let mut model = init_model(config)?;
    load_checkpoint(path)?.restore(&mut model.store, &[])?;
    Ok(model)
}

fn out_path(config: &RunConfig, name: &str) -> Result<PathBuf, Error> {
    let dir = config.output_dir.clone().unwrap_or_default();
    std::fs::create_dir_all(&dir)?;
    Ok(dir.join(name))
}

fn print_summary(summary: &Summary) {
    println!("{}", summary.table);
    for r in &summary.rows {
        println!("  {:<32} top1 {:.4}  top5 {:.4}", r.row, r.top1, r.top5);
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let config = effective_config(&cli.common, &cli.command)?;
    match &cli.command {
        Command::Patchify { image, x, y } => {
            let img = load_ppm(image)?;
            let m = &config.model;
            let schedule = ZoomSchedule::new(m.patch_count, m.max_zoom)?;
            let patches =
                extract_multizoom(&img, GazeCenter::new(*x, *y), m.patch_size, &schedule)?;
            for (i, z) in schedule.zs().iter().enumerate() {
                let patch = Image::new(m.patch_size, m.patch_size, patches.patch(i).to_vec())?;
                let path = out_path(&config, &format!("patch-{i}.ppm"))?;
                write_ppm(&patch, &path)?;
                println!("z={z:.3} -> {}", path.display());
            }
        }
        Command::Pretrain => {
            let data = build_datasets(&config.dataset, config.seed)?;
            let mut run = Run::new(config, "pretrain")?;
            print_summary(&pretrain_stage1(&mut run, &data)?.summary);
        }
        Command::ShuffledVit => {
            let data = build_datasets(&config.dataset, config.seed)?;
            let mut run = Run::new(config, "shuffled-vit")?;
            print_summary(&shuffled_vit_experiment(&mut run, &data)?.summary);
        }
        Command::Baseline => {
            let data = build_datasets(&config.dataset, config.seed)?;
            let mut run = Run::new(config, "baseline")?;
            print_summary(&train_vit_baseline(&mut run, &data)?.summary);
        }
        Command::TrainPolicy { checkpoint } => {
            let data = build_datasets(&config.dataset, config.seed)?;
            let model = load_model(&config, checkpoint)?;
            let mut run = Run::new(config, "train-policy")?;
            print_summary(&train_stage2(&mut run, &data, model)?.summary);
        }
        Command::Eval { checkpoint } => {
            let data = build_datasets(&config.dataset, config.seed)?;
            let model = load_model(&config, checkpoint)?;
            let mut run = Run::new(config, "eval")?;
            let c = &run.config;
            let mut summary = Summary {
                table: "evaluation".into(),
                rows: Vec::new(),
            };
            for (name, mode) in [
                ("random", PolicyMode::Random),
                ("learned", PolicyMode::Learned),
            ] {
                let acc = evaluate(
                    &model,
                    &data.val,
                    &mode,
                    c.episode_len,
                    c.seed,
                    c.eval_batch,
                )?;
                run.metrics.eval(name, &acc)?;
                summary.push_steps(name, &acc);
            }
            run.finish(&summary)?;
            print_summary(&summary);
        }
        Command::VizGaze {
            checkpoint,
            image,
            steps,
        } => {
            let model = load_model(&config, checkpoint)?;
            let img = load_ppm(image)?;
            let overlay = viz_gaze(&model, &img, steps.unwrap_or(config.episode_len))?;
            let ppm = out_path(&config, "gaze.ppm")?;
            write_ppm(&overlay.render(&img), &ppm)?;
            let href = std::fs::canonicalize(image)?;
            let svg = out_path(&config, "gaze.svg")?;
            std::fs::write(&svg, overlay.svg(Some(&href.display().to_string())))?;
            println!("{}\n{}", ppm.display(), svg.display());
        }
        Command::VizShift {
            image,
            patch,
            small,
        } => {
            let out = viz_shift(&load_ppm(image)?, *patch, *small)?;
            let path = out_path(&config, "shift.ppm")?;
            write_ppm(&out, &path)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let json = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{json}");
            ExitCode::FAILURE
        }
    }
}
