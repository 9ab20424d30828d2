//! Experiment driver: run configuration, datasets, metrics files and the
//! training stages built on top of the model, policy and GRPO modules.
//!
//! A [`Run`] owns the validated [`RunConfig`] and the metrics stream. With an
//! output directory it writes `config.toml` (the effective configuration),
//! `metrics.jsonl`, `summary.json` and one `.fve` checkpoint per trained
//! model.

#[cfg(test)]
mod tests;
mod train;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use train::{
    evaluate, evaluate_grid, gaze_trajectory, init_model, overfit_batch, pretrain_stage1,
    shuffle_groups, shuffled_vit_experiment, train_stage2, train_vit_baseline, Model, PolicyMode,
    ShuffledOutput, Stage2Output, StepAccuracy, TrainOutput,
};

use crate::data::synth::{cluttered_dataset, synth_digits};
use crate::data::{load_idx, load_manifest, DataError, LabeledDataset, Split};
use crate::grpo::{AdvantageScheme, GrpoConfig, GrpoRecord};
use crate::model::{CheckpointError, EncoderConfig, ModelError};
use crate::patchify::Image;
use crate::policy::PolicyConfig;
use crate::tensor::{AdamWConfig, ParamStore};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{phase} diverged at step {step}: {reason}")]
    Diverged {
        phase: String,
        step: usize,
        reason: String,
        /// Parameters before the failing update.
        last_good: Box<ParamStore<f32>>,
        checkpoint: Option<PathBuf>,
    },
    #[error("stage 2 modified frozen parameters: {0:?}")]
    FrozenModified(Vec<String>),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    #[default]
    Pretrain,
    TrainPolicy,
    ShuffledVit,
    Baseline,
    Eval,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Idx,
    Manifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// IDX image file or manifest, depending on `source`.
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub val_images: Option<PathBuf>,
    pub val_labels: Option<PathBuf>,
    /// Number of synthetic items, or a cap on loaded ones (0 keeps all).
    pub train_size: usize,
    pub val_size: usize,
    /// Side of the cluttered canvas the digits are placed on; 0 keeps the
    /// source images as they are.
    pub canvas: usize,
    pub distractors: usize,
    /// Images are resized to this square side for the grid (ViT) paths.
    pub grid_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            train_images: None,
            train_labels: None,
            val_images: None,
            val_labels: None,
            train_size: 5000,
            val_size: 1000,
            canvas: 128,
            distractors: 4,
            grid_size: 64,
        }
    }
}

/// Stage-2 settings; episode length, seed and optimizer come from the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub group_size: usize,
    pub inner_epochs: usize,
    pub eps_clip: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_outer_steps: Option<usize>,
    pub advantage: AdvantageScheme,
}

impl Default for Stage2Config {
    fn default() -> Self {
        let g = GrpoConfig::default();
        Self {
            group_size: g.group_size,
            inner_epochs: g.inner_epochs,
            eps_clip: g.eps_clip,
            lr: g.lr,
            batch_size: g.batch_size,
            epochs: g.epochs,
            max_outer_steps: g.max_outer_steps,
            advantage: g.advantage,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub stage: Stage,
    pub seed: u64,
    /// Glimpses per episode.
    pub episode_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Linear warmup as a fraction of all optimizer steps.
    pub warmup: f64,
    /// Beta parameter of MixUp; 0 turns it off.
    pub mixup_alpha: f64,
    /// Stops training after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Validate every this many epochs (0: never).
    pub eval_every: usize,
    pub eval_batch: usize,
    /// Tile groups of the shuffled experiment, one per step.
    pub groups: usize,
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: EncoderConfig,
    pub policy: PolicyConfig,
    pub stage2: Stage2Config,
    pub optimizer: AdamWConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            seed: 0,
            episode_len: 8,
            epochs: 10,
            batch_size: 32,
            base_lr: 5e-4,
            warmup: 0.05,
            mixup_alpha: 0.2,
            max_steps: None,
            eval_every: 1,
            eval_batch: 100,
            groups: 4,
            output_dir: None,
            dataset: DatasetConfig::default(),
            model: EncoderConfig::default(),
            policy: PolicyConfig::default(),
            stage2: Stage2Config::default(),
            optimizer: AdamWConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(PipelineError::Config(m));
        self.model.validate()?;
        for (name, v) in [
            ("episode_len", self.episode_len),
            ("batch_size", self.batch_size),
            ("eval_batch", self.eval_batch),
            ("groups", self.groups),
            (
                "stage2.group_size",
                self.stage2.group_size.saturating_sub(1),
            ),
            ("stage2.batch_size", self.stage2.batch_size),
        ] {
            if v == 0 {
                return fail(format!("{name} is too small"));
            }
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr {} must be finite and >= 0", self.base_lr));
        }
        if !(0.0..=1.0).contains(&self.warmup) {
            return fail(format!(
                "warmup {} must be a fraction in [0,1]",
                self.warmup
            ));
        }
        if !(self.mixup_alpha >= 0.0) {
            return fail(format!("mixup_alpha {} must be >= 0", self.mixup_alpha));
        }
        if !(self.policy.sigma >= 0.0) || self.policy.components == 0 {
            return fail("policy needs at least one component and sigma >= 0".into());
        }
        let d = &self.dataset;
        if d.grid_size == 0 || !d.grid_size.is_multiple_of(self.model.patch_size) {
            return fail(format!(
                "dataset.grid_size {} is not a multiple of model.patch_size {}",
                d.grid_size, self.model.patch_size
            ));
        }
        let tiles = (d.grid_size / self.model.patch_size).pow(2);
        if !tiles.is_multiple_of(self.groups) {
            return fail(format!(
                "{tiles} grid tiles do not split into {} equal groups",
                self.groups
            ));
        }
        let needed: &[(&str, &Option<PathBuf>)] = match d.source {
            DataSource::Synthetic => &[],
            DataSource::Idx => &[
                ("dataset.train_images", &d.train_images),
                ("dataset.train_labels", &d.train_labels),
                ("dataset.val_images", &d.val_images),
                ("dataset.val_labels", &d.val_labels),
            ],
            DataSource::Manifest => &[
                ("dataset.train_images", &d.train_images),
                ("dataset.val_images", &d.val_images),
            ],
        };
        for (key, path) in needed {
            match path {
                None => return fail(format!("{key} is required for this dataset source")),
                Some(p) if !p.exists() => {
                    return fail(format!("{key}: {} does not exist", p.display()))
                }
                _ => {}
            }
        }
        if d.source == DataSource::Synthetic && (d.train_size == 0 || d.val_size == 0) {
            return fail("synthetic datasets need train_size and val_size > 0".into());
        }
        if d.canvas != 0
            && d.canvas < crate::data::synth::DIGIT_SIDE
            && d.source == DataSource::Synthetic
        {
            return fail(format!(
                "dataset.canvas {} is smaller than a digit",
                d.canvas
            ));
        }
        Ok(())
    }

    pub fn grpo(&self) -> GrpoConfig {
        let s = &self.stage2;
        GrpoConfig {
            group_size: s.group_size,
            episode_len: self.episode_len,
            inner_epochs: s.inner_epochs,
            eps_clip: s.eps_clip,
            lr: s.lr,
            batch_size: s.batch_size,
            epochs: s.epochs,
            max_outer_steps: s.max_outer_steps,
            advantage: s.advantage,
            seed: self.seed ^ stream::STAGE2,
            optimizer: self.optimizer,
        }
    }
}

/// Independent random streams derived from the run seed.
pub(crate) mod stream {
    pub const TRAIN_DATA: u64 = 0x01;
    pub const VAL_DATA: u64 = 0x02;
    pub const INIT: u64 = 0x03;
    pub const TRAIN: u64 = 0x04;
    pub const EVAL: u64 = 0x05;
    pub const STAGE2: u64 = 0x06;
    pub const ORDER: u64 = 0x07;

    pub fn rng(seed: u64, tag: u64) -> rand_chacha::ChaCha8Rng {
        rand::SeedableRng::seed_from_u64(seed ^ tag.wrapping_mul(0xA076_1D64_78BD_642F))
    }
}

/// Training and validation data.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
}

fn cap(ds: LabeledDataset, n: usize) -> LabeledDataset {
    if n == 0 || n >= ds.len() {
        ds
    } else {
        ds.subset(&(0..n).collect::<Vec<_>>())
    }
}

/// Builds (or loads) the datasets a config describes. Pure in `seed`.
pub fn build_datasets(config: &DatasetConfig, seed: u64) -> Result<Datasets> {
    let mut train_rng = stream::rng(seed, stream::TRAIN_DATA);
    let mut val_rng = stream::rng(seed, stream::VAL_DATA);
    let path = |p: &Option<PathBuf>| {
        p.clone()
            .ok_or_else(|| PipelineError::Config("missing dataset path".into()))
    };
    let (train, val) = match config.source {
        DataSource::Synthetic => (
            synth_digits(config.train_size, &mut train_rng, Split::Train),
            synth_digits(config.val_size, &mut val_rng, Split::Val),
        ),
        DataSource::Idx => {
            let t = load_idx(
                path(&config.train_images)?,
                path(&config.train_labels)?,
                Split::Train,
            )?;
            let v = load_idx(
                path(&config.val_images)?,
                path(&config.val_labels)?,
                Split::Val,
            )?;
            (cap(t, config.train_size), cap(v, config.val_size))
        }
        DataSource::Manifest => (
            cap(
                load_manifest(path(&config.train_images)?, Split::Train)?,
                config.train_size,
            ),
            cap(
                load_manifest(path(&config.val_images)?, Split::Val)?,
                config.val_size,
            ),
        ),
    };
    if train.is_empty() || val.is_empty() {
        return Err(DataError::Empty.into());
    }
    if config.canvas == 0 {
        return Ok(Datasets { train, val });
    }
    let (nt, nv) = (train.len(), val.len());
    Ok(Datasets {
        train: cluttered_dataset(
            &mut train_rng,
            nt,
            config.canvas,
            &train,
            config.distractors,
            Split::Train,
        ),
        val: cluttered_dataset(
            &mut val_rng,
            nv,
            config.canvas,
            &val,
            config.distractors,
            Split::Val,
        ),
    })
}

/// Every image resized to `side×side` (unchanged if already that size).
pub fn grid_dataset(ds: &LabeledDataset, side: usize) -> LabeledDataset {
    let images = ds
        .images
        .iter()
        .map(|img: &Image| {
            if img.height() == side && img.width() == side {
                img.clone()
            } else {
                img.resize_bilinear(side, side)
            }
        })
        .collect();
    LabeledDataset {
        images,
        labels: ds.labels.clone(),
        classes: ds.classes,
        split: ds.split,
    }
}

/// Validation accuracy after one training epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: usize,
    pub train_loss: f64,
    pub lr: f64,
    /// Top-1/top-5 per step index; empty when the epoch was not validated.
    pub val_top1: Vec<f64>,
    pub val_top5: Vec<f64>,
}

/// One row of the final results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub row: String,
    pub step: Option<usize>,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub table: String,
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    /// Appends one row per step, labelled `"{label} - Step k"`.
    pub fn push_steps(&mut self, label: &str, acc: &StepAccuracy) {
        for (i, (&t1, &t5)) in acc.top1.iter().zip(&acc.top5).enumerate() {
            self.rows.push(SummaryRow {
                row: format!("{label} - Step {}", i + 1),
                step: Some(i + 1),
                top1: t1,
                top5: t5,
            });
        }
    }
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line<'a> {
    Header {
        command: &'a str,
        config: &'a RunConfig,
    },
    Epoch(&'a EpochRecord),
    Stage2(&'a GrpoRecord),
    Eval {
        name: &'a str,
        top1: &'a [f64],
        top5: &'a [f64],
    },
}

/// JSON-lines metrics, kept in memory and mirrored to a file when the run has
/// an output directory.
#[derive(Debug, Default)]
pub struct Metrics {
    pub lines: Vec<String>,
    file: Option<BufWriter<File>>,
}

impl Metrics {
    fn push(&mut self, line: &Line<'_>) -> Result<()> {
        let text = serde_json::to_string(line).map_err(|e| PipelineError::Config(e.to_string()))?;
        if let Some(f) = &mut self.file {
            writeln!(f, "{text}")?;
            f.flush()?;
        }
        self.lines.push(text);
        Ok(())
    }

    pub fn epoch(&mut self, r: &EpochRecord) -> Result<()> {
        self.push(&Line::Epoch(r))
    }

    pub fn stage2(&mut self, r: &GrpoRecord) -> Result<()> {
        self.push(&Line::Stage2(r))
    }

    pub fn eval(&mut self, name: &str, acc: &StepAccuracy) -> Result<()> {
        self.push(&Line::Eval {
            name,
            top1: &acc.top1,
            top5: &acc.top5,
        })
    }
}

/// A validated configuration plus its metrics stream and output directory.
#[derive(Debug)]
pub struct Run {
    pub config: RunConfig,
    pub metrics: Metrics,
}

impl Run {
    /// Validates `config`, creates the output directory if one is set, writes
    /// the effective configuration and the metrics header.
    pub fn new(config: RunConfig, command: &str) -> Result<Self> {
        config.validate()?;
        let mut metrics = Metrics::default();
        if let Some(dir) = &config.output_dir {
            std::fs::create_dir_all(dir)?;
            let text =
                toml::to_string(&config).map_err(|e| PipelineError::Config(e.to_string()))?;
            std::fs::write(dir.join("config.toml"), text)?;
            metrics.file = Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?));
        }
        metrics.push(&Line::Header {
            command,
            config: &config,
        })?;
        Ok(Self { config, metrics })
    }

    pub fn output_dir(&self) -> Option<&Path> {
        self.config.output_dir.as_deref()
    }

    /// Writes `<name>.fve` into the output directory, if any.
    pub fn save(&self, store: &ParamStore<f32>, name: &str) -> Result<Option<PathBuf>> {
        match self.output_dir() {
            None => Ok(None),
            Some(dir) => {
                let path = dir.join(format!("{name}.fve"));
                crate::model::save_checkpoint(store, &path)?;
                Ok(Some(path))
            }
        }
    }

    /// Writes `summary.json` into the output directory, if any.
    pub fn finish(&self, summary: &Summary) -> Result<()> {
        if let Some(dir) = self.output_dir() {
            let text = serde_json::to_string_pretty(summary)
                .map_err(|e| PipelineError::Config(e.to_string()))?;
            std::fs::write(dir.join("summary.json"), text + "\n")?;
        }
        Ok(())
    }

    pub(crate) fn rng(&self, tag: u64) -> ChaCha8Rng {
        stream::rng(self.config.seed, tag)
    }
}
