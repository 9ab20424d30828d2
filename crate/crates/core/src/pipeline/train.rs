use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    grid_dataset, stream, Datasets, EpochRecord, PipelineError, Result, Run, RunConfig, Summary,
    SummaryRow,
};
use crate::data::{epoch_order, mixup, one_hot, LabeledDataset};
use crate::grpo::{grpo_train, random_centers};
use crate::model::{top_k_hits, Encoder, Episode, Glimpses};
use crate::patchify::{GazeCenter, Image};
use crate::policy::Policy;
use crate::tensor::{cosine_lr, OptimizerState, ParamStore, Tensor, TensorError};

/// Encoder, task head and policy sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: Encoder,
    pub policy: Policy,
    pub store: ParamStore<f32>,
}

impl Model {
    /// Rebuilds the module handles around an existing store.
    pub fn attach(config: &RunConfig, store: ParamStore<f32>) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::attach(config.model.clone(), &store)?,
            policy: Policy::attach(config.policy.clone(), config.model.dim, &store)?,
            store,
        })
    }
}

/// Fresh parameters; a pure function of the config (seed included).
pub fn init_model(config: &RunConfig) -> Result<Model> {
    let mut rng = stream::rng(config.seed, stream::INIT);
    let mut store = ParamStore::new();
    let encoder = Encoder::new(config.model.clone(), &mut store, &mut rng)?;
    let policy = Policy::new(
        config.policy.clone(),
        config.model.dim,
        &mut store,
        &mut rng,
    )?;
    Ok(Model {
        encoder,
        policy,
        store,
    })
}

/// How gaze centers are chosen during evaluation.
#[derive(Clone, Debug, PartialEq)]
pub enum PolicyMode {
    /// Uniform centers from a stream seeded by the evaluation seed.
    Random,
    /// The policy's deterministic action on the current state.
    Learned,
    /// Step `t` uses `centers[t % len]` for every image.
    Fixed(Vec<GazeCenter>),
}

/// Accuracy per step index (entry 0 is step 1).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepAccuracy {
    pub top1: Vec<f64>,
    pub top5: Vec<f64>,
}

impl StepAccuracy {
    pub fn last_top1(&self) -> f64 {
        self.top1.last().copied().unwrap_or(0.0)
    }
}

struct Tally {
    top1: Vec<usize>,
    top5: Vec<usize>,
    seen: usize,
}

impl Tally {
    fn new(steps: usize) -> Self {
        Self {
            top1: vec![0; steps],
            top5: vec![0; steps],
            seen: 0,
        }
    }

    fn add(&mut self, ep: &Episode<'_, f32>, labels: &[usize]) {
        for t in 0..self.top1.len() {
            let logits = ep.logits_value(t);
            let k5 = 5.min(*logits.shape().last().unwrap_or(&1));
            self.top1[t] += top_k_hits(logits, labels, 1)
                .into_iter()
                .filter(|&h| h)
                .count();
            self.top5[t] += top_k_hits(logits, labels, k5)
                .into_iter()
                .filter(|&h| h)
                .count();
        }
        self.seen += labels.len();
    }

    fn finish(self) -> StepAccuracy {
        let n = self.seen.max(1) as f64;
        StepAccuracy {
            top1: self.top1.iter().map(|&c| c as f64 / n).collect(),
            top5: self.top5.iter().map(|&c| c as f64 / n).collect(),
        }
    }
}

fn batch_of<'a>(ds: &'a LabeledDataset, idx: &[usize]) -> (Vec<&'a Image>, Vec<usize>) {
    (
        idx.iter().map(|&i| &ds.images[i]).collect(),
        idx.iter().map(|&i| ds.labels[i]).collect(),
    )
}

/// Per-step top-1/top-5 of multi-zoom episodes of length `n`. Deterministic
/// in `seed`; batches are taken in dataset order.
pub fn evaluate(
    model: &Model,
    ds: &LabeledDataset,
    mode: &PolicyMode,
    n: usize,
    seed: u64,
    batch: usize,
) -> Result<StepAccuracy> {
    if let PolicyMode::Fixed(c) = mode {
        if c.is_empty() {
            return Err(PipelineError::Config(
                "fixed policy needs at least one center".into(),
            ));
        }
    }
    let mut tally = Tally::new(n);
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(batch.max(1)) {
        let (images, labels) = batch_of(ds, chunk);
        let b = images.len();
        // One stream per image so the centers do not depend on batching.
        let mut rngs: Vec<ChaCha8Rng> = chunk
            .iter()
            .map(|&i| stream::rng(seed, i as u64 + 1))
            .collect();
        let cfg = model.encoder.config();
        let ep = model
            .encoder
            .run_steps(&model.store, b, None, n, |t, state| {
                let centers = match mode {
                    PolicyMode::Random => {
                        rngs.iter_mut().flat_map(|r| random_centers(r, 1)).collect()
                    }
                    PolicyMode::Fixed(c) => vec![c[t % c.len()]; b],
                    PolicyMode::Learned => model
                        .policy
                        .mixtures(&model.store, state)?
                        .iter()
                        .map(|m| m.deterministic())
                        .collect(),
                };
                Glimpses::multizoom(&images, &centers, cfg)
            })?;
        tally.add(&ep, &labels);
    }
    Ok(tally.finish())
}

/// Deterministic gaze centers of the learned policy on one image, one per step.
pub fn gaze_trajectory(model: &Model, image: &Image, steps: usize) -> Result<Vec<GazeCenter>> {
    let mut path = Vec::with_capacity(steps);
    let cfg = model.encoder.config();
    model
        .encoder
        .run_steps(&model.store, 1, None, steps, |_, state| {
            let c = model.policy.mixtures(&model.store, state)?[0].deterministic();
            path.push(c);
            Glimpses::multizoom(&[image], &[c], cfg)
        })?;
    Ok(path)
}

/// Splits `tiles` indices into `groups` equal random groups.
pub fn shuffle_groups<R: Rng>(tiles: usize, groups: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..tiles).collect();
    perm.shuffle(rng);
    perm.chunks(tiles / groups.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

fn grouped_episode<'a>(
    encoder: &Encoder,
    store: &'a ParamStore<f32>,
    images: &[&Image],
    targets: Option<&Tensor<f32>>,
    groups: usize,
    rng: &mut ChaCha8Rng,
) -> crate::model::Result<Episode<'a, f32>> {
    let p = encoder.config().patch_size;
    let parts: Vec<Vec<Vec<usize>>> = images
        .iter()
        .map(|img| shuffle_groups((img.height() / p) * (img.width() / p), groups, rng))
        .collect();
    encoder.run_steps(store, images.len(), targets, groups, |t, _| {
        let sel: Vec<Vec<usize>> = parts.iter().map(|g| g[t].clone()).collect();
        Glimpses::grid(images, Some(&sel), encoder.config())
    })
}

/// Per-step accuracy over grid tiles: `groups` steps over random tile groups,
/// or a single full-grid step when `None`.
pub fn evaluate_grid(
    model: &Model,
    ds: &LabeledDataset,
    groups: Option<usize>,
    seed: u64,
    batch: usize,
) -> Result<StepAccuracy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::new(groups.unwrap_or(1));
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(batch.max(1)) {
        let (images, labels) = batch_of(ds, chunk);
        let ep = match groups {
            Some(g) => grouped_episode(&model.encoder, &model.store, &images, None, g, &mut rng)?,
            None => model.encoder.vit_forward(&model.store, &images, None)?,
        };
        tally.add(&ep, &labels);
    }
    Ok(tally.finish())
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Mode<'a> {
    Glimpse,
    /// Step `t` of image `i` always looks at `centers[t][i]`.
    Pinned(&'a [Vec<GazeCenter>]),
    Groups(usize),
    Grid,
}

fn validate(run: &Run, model: &Model, val: &LabeledDataset, mode: Mode) -> Result<StepAccuracy> {
    let c = &run.config;
    let seed = c.seed ^ stream::EVAL;
    match mode {
        Mode::Glimpse | Mode::Pinned(_) => evaluate(
            model,
            val,
            &PolicyMode::Random,
            c.episode_len,
            seed,
            c.eval_batch,
        ),
        Mode::Groups(g) => evaluate_grid(model, val, Some(g), seed, c.eval_batch),
        Mode::Grid => evaluate_grid(model, val, None, seed, c.eval_batch),
    }
}

/// Supervised training of everything except the policy. Returns the epoch
/// history; the last record always carries validation accuracy when there
/// was at least one epoch and validation is enabled.
fn supervised(
    run: &mut Run,
    phase: &str,
    mode: Mode,
    model: &mut Model,
    data: &Datasets,
) -> Result<Vec<EpochRecord>> {
    let c = run.config.clone();
    let saved: Vec<bool> = model.store.iter().map(|(_, p)| p.trainable).collect();
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for &id in &ids {
        let p = model.store.get_mut(id);
        p.trainable = !p.name.starts_with("policy.");
    }
    let result = supervised_loop(run, phase, mode, model, data, &c);
    for (id, t) in ids.into_iter().zip(saved) {
        model.store.get_mut(id).trainable = t;
    }
    result
}

fn supervised_loop(
    run: &mut Run,
    phase: &str,
    mode: Mode,
    model: &mut Model,
    data: &Datasets,
    c: &RunConfig,
) -> Result<Vec<EpochRecord>> {
    let train = &data.train;
    let per_epoch = train.len().div_ceil(c.batch_size);
    let mut total = c.epochs * per_epoch;
    if let Some(m) = c.max_steps {
        total = total.min(m);
    }
    let warmup = (c.warmup * total as f64).round() as usize;
    let mut opt = OptimizerState::new(&model.store, c.optimizer);
    let mut rng = run.rng(stream::TRAIN);
    let mut step = 0usize;
    let mut history = Vec::new();
    let mut lr = 0.0;
    for epoch in 0..c.epochs {
        if step >= total {
            break;
        }
        let order = epoch_order(train.len(), c.seed ^ stream::ORDER, epoch);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(c.batch_size) {
            if step >= total {
                break;
            }
            let (images, labels) = batch_of(train, chunk);
            let targets: Vec<Vec<f32>> =
                labels.iter().map(|&l| one_hot(l, train.classes)).collect();
            let mixed = if c.mixup_alpha > 0.0 && images.len() >= 2 {
                let owned: Vec<Image> = images.iter().map(|&i| i.clone()).collect();
                Some(mixup(&owned, &targets, c.mixup_alpha, &mut rng)?)
            } else {
                None
            };
            let (images, targets) = match &mixed {
                Some(m) => (m.images.iter().collect::<Vec<_>>(), &m.targets),
                None => (images, &targets),
            };
            let b = images.len();
            let y = Tensor::new(&[b, train.classes], targets.concat())
                .map_err(crate::model::ModelError::from)?;
            let (loss, grads) = {
                let mut ep = match mode {
                    Mode::Glimpse => model.encoder.run_episode(
                        &model.store,
                        &images,
                        Some(&y),
                        c.episode_len,
                        |_, _| random_centers(&mut rng, b),
                    )?,
                    Mode::Pinned(centers) => model.encoder.run_episode(
                        &model.store,
                        &images,
                        Some(&y),
                        c.episode_len,
                        |t, _| chunk.iter().map(|&i| centers[t][i]).collect(),
                    )?,
                    Mode::Groups(g) => grouped_episode(
                        &model.encoder,
                        &model.store,
                        &images,
                        Some(&y),
                        g,
                        &mut rng,
                    )?,
                    Mode::Grid => model.encoder.vit_forward(&model.store, &images, Some(&y))?,
                };
                let loss = ep.loss_value().unwrap_or(f64::NAN);
                if !loss.is_finite() {
                    (loss, None)
                } else {
                    (loss, Some(ep.backward()?))
                }
            };
            lr = cosine_lr(step, warmup, total, c.base_lr);
            let failure = match &grads {
                None => Some(format!("loss is {loss}")),
                Some(g) => match opt.step(&mut model.store, g, lr) {
                    Ok(()) => None,
                    Err(e @ TensorError::NonFiniteGradient(_)) => Some(e.to_string()),
                    Err(e) => return Err(crate::model::ModelError::from(e).into()),
                },
            };
            if let Some(reason) = failure {
                let checkpoint = run.save(&model.store, &format!("{phase}-last-good"))?;
                return Err(PipelineError::Diverged {
                    phase: phase.into(),
                    step,
                    reason,
                    last_good: Box::new(model.store.clone()),
                    checkpoint,
                });
            }
            loss_sum += loss;
            batches += 1;
            step += 1;
        }
        let last = epoch + 1 == c.epochs || step >= total;
        let acc = if c.eval_every > 0 && ((epoch + 1) % c.eval_every == 0 || last) {
            validate(run, model, &data.val, mode)?
        } else {
            StepAccuracy::default()
        };
        let record = EpochRecord {
            phase: phase.into(),
            epoch,
            steps: step,
            train_loss: loss_sum / batches.max(1) as f64,
            lr,
            val_top1: acc.top1,
            val_top5: acc.top5,
        };
        run.metrics.epoch(&record)?;
        history.push(record);
    }
    Ok(history)
}

/// Result of a supervised stage.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    /// Validation accuracy of the final parameters.
    pub val: StepAccuracy,
    pub summary: Summary,
}

fn final_accuracy(
    run: &Run,
    model: &Model,
    history: &[EpochRecord],
    val: &LabeledDataset,
    mode: Mode,
) -> Result<StepAccuracy> {
    match history.last() {
        Some(r) if !r.val_top1.is_empty() => Ok(StepAccuracy {
            top1: r.val_top1.clone(),
            top5: r.val_top5.clone(),
        }),
        _ => validate(run, model, val, mode),
    }
}

/// Stage 1: trains prompt, encoder and task head on episodes with uniformly
/// random gaze centers. Writes `stage1.fve`.
pub fn pretrain_stage1(run: &mut Run, data: &Datasets) -> Result<TrainOutput> {
    let mut model = init_model(&run.config)?;
    let history = supervised(run, "stage1", Mode::Glimpse, &mut model, data)?;
    run.save(&model.store, "stage1")?;
    let val = final_accuracy(run, &model, &history, &data.val, Mode::Glimpse)?;
    let mut summary = Summary {
        table: "per-step accuracy".into(),
        rows: Vec::new(),
    };
    summary.push_steps("Pretrain Rand Policy", &val);
    run.finish(&summary)?;
    Ok(TrainOutput {
        model,
        history,
        val,
        summary,
    })
}

/// Stage-1 training on a single fixed batch without MixUp or validation.
/// Gaze centers are drawn once per image and step and then kept, so the
/// batch is a fixed target. Returns the training loss after every step.
pub fn overfit_batch(config: &RunConfig, batch: &LabeledDataset, steps: usize) -> Result<Vec<f64>> {
    let config = RunConfig {
        epochs: steps,
        batch_size: batch.len().max(1),
        mixup_alpha: 0.0,
        eval_every: 0,
        max_steps: None,
        output_dir: None,
        ..config.clone()
    };
    let mut run = Run::new(config, "overfit")?;
    let data = Datasets {
        train: batch.clone(),
        val: batch.clone(),
    };
    let mut model = init_model(&run.config)?;
    let mut rng = run.rng(stream::TRAIN);
    let centers: Vec<Vec<GazeCenter>> = (0..run.config.episode_len)
        .map(|_| random_centers(&mut rng, batch.len()))
        .collect();
    let history = supervised(
        &mut run,
        "overfit",
        Mode::Pinned(&centers),
        &mut model,
        &data,
    )?;
    Ok(history.iter().map(|r| r.train_loss).collect())
}

#[derive(Clone, Debug)]
pub struct Stage2Output {
    pub model: Model,
    pub outer_steps: usize,
    pub random: StepAccuracy,
    pub learned: StepAccuracy,
    pub summary: Summary,
}

fn frozen_bits(store: &ParamStore<f32>) -> Vec<(String, Vec<u32>)> {
    store
        .iter()
        .filter(|(_, p)| !p.name.starts_with("policy."))
        .map(|(_, p)| {
            (
                p.name.clone(),
                p.value.data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

/// Stage 2: GRPO on the policy with the stage-1 encoder and head frozen.
/// Fails if any non-policy parameter changed. Writes `stage2.fve` and a
/// summary comparing random and learned gaze per step.
pub fn train_stage2(run: &mut Run, data: &Datasets, mut model: Model) -> Result<Stage2Output> {
    let before = frozen_bits(&model.store);
    let grpo = run.config.grpo();
    let mut sink_error = None;
    let metrics = &mut run.metrics;
    let outer_steps = grpo_train(
        &model.encoder,
        &model.policy,
        &mut model.store,
        &data.train,
        &grpo,
        |r| {
            if let Err(e) = metrics.stage2(r) {
                sink_error.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = sink_error {
        return Err(e);
    }
    let after = frozen_bits(&model.store);
    let changed: Vec<String> = before
        .iter()
        .zip(&after)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.clone())
        .collect();
    if !changed.is_empty() {
        return Err(PipelineError::FrozenModified(changed));
    }
    run.save(&model.store, "stage2")?;
    let c = &run.config;
    let seed = c.seed ^ stream::EVAL;
    let random = evaluate(
        &model,
        &data.val,
        &PolicyMode::Random,
        c.episode_len,
        seed,
        c.eval_batch,
    )?;
    let learned = evaluate(
        &model,
        &data.val,
        &PolicyMode::Learned,
        c.episode_len,
        seed,
        c.eval_batch,
    )?;
    run.metrics.eval("random", &random)?;
    run.metrics.eval("learned", &learned)?;
    let mut summary = Summary {
        table: "policy vs random".into(),
        rows: Vec::new(),
    };
    summary.push_steps("Pretrain Rand Policy", &random);
    summary.push_steps("With Policy", &learned);
    run.finish(&summary)?;
    Ok(Stage2Output {
        model,
        outer_steps,
        random,
        learned,
        summary,
    })
}

/// Single-pass full-attention baseline over every grid tile. Images are
/// resized to `dataset.grid_size`. Writes `baseline.fve`.
pub fn train_vit_baseline(run: &mut Run, data: &Datasets) -> Result<TrainOutput> {
    let side = run.config.dataset.grid_size;
    let data = Datasets {
        train: grid_dataset(&data.train, side),
        val: grid_dataset(&data.val, side),
    };
    let mut model = init_model(&run.config)?;
    let history = supervised(run, "baseline", Mode::Grid, &mut model, &data)?;
    run.save(&model.store, "baseline")?;
    let val = final_accuracy(run, &model, &history, &data.val, Mode::Grid)?;
    let summary = Summary {
        table: "full attention".into(),
        rows: vec![vit_row(&val)],
    };
    run.finish(&summary)?;
    Ok(TrainOutput {
        model,
        history,
        val,
        summary,
    })
}

fn vit_row(acc: &StepAccuracy) -> SummaryRow {
    SummaryRow {
        row: "ViT".into(),
        step: None,
        top1: acc.top1[0],
        top5: acc.top5[0],
    }
}

#[derive(Clone, Debug)]
pub struct ShuffledOutput {
    pub iterative: TrainOutput,
    pub baseline: TrainOutput,
    pub summary: Summary,
}

/// Iterative encoder fed one random group of grid tiles per step (each tile
/// exactly once per image per pass), next to the full-attention baseline
/// trained with the same settings. Writes `shuffled.fve` and `baseline.fve`.
pub fn shuffled_vit_experiment(run: &mut Run, data: &Datasets) -> Result<ShuffledOutput> {
    let side = run.config.dataset.grid_size;
    let groups = run.config.groups;
    let data = Datasets {
        train: grid_dataset(&data.train, side),
        val: grid_dataset(&data.val, side),
    };
    let mut model = init_model(&run.config)?;
    let history = supervised(run, "shuffled", Mode::Groups(groups), &mut model, &data)?;
    run.save(&model.store, "shuffled")?;
    let val = final_accuracy(run, &model, &history, &data.val, Mode::Groups(groups))?;
    let iterative = TrainOutput {
        model,
        history,
        val,
        summary: Summary::default(),
    };

    let mut model = init_model(&run.config)?;
    let history = supervised(run, "baseline", Mode::Grid, &mut model, &data)?;
    run.save(&model.store, "baseline")?;
    let val = final_accuracy(run, &model, &history, &data.val, Mode::Grid)?;
    let baseline = TrainOutput {
        model,
        history,
        val,
        summary: Summary::default(),
    };

    let mut summary = Summary {
        table: "shuffled groups".into(),
        rows: Vec::new(),
    };
    summary.push_steps("Iterative", &iterative.val);
    summary.rows.push(vit_row(&baseline.val));
    run.finish(&summary)?;
    Ok(ShuffledOutput {
        iterative,
        baseline,
        summary,
    })
}
