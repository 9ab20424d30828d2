//! Group relative policy optimisation of the gaze policy with a frozen
//! encoder.
//!
//! For every image a group of stochastic episodes is rolled out with the
//! current policy. Each action gets a raw advantage (terminal log-likelihood or
//! per-step loss improvement), which is normalised across the group separately
//! for every time step. The policy then ascends the clipped ratio objective
//! for a few inner epochs on that fixed buffer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::model::{Encoder, ModelError, Result, Session};
use crate::patchify::{GazeCenter, Image};
use crate::policy::{MixtureParams, Policy};
use crate::tensor::{AdamWConfig, OptimizerState, ParamStore, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvantageScheme {
    Terminal,
    Improvement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub episode_len: usize,
    pub inner_epochs: usize,
    pub eps_clip: f64,
    pub lr: f64,
    /// Images per outer batch.
    pub batch_size: usize,
    /// Passes over the training set.
    pub epochs: usize,
    /// Hard cap on outer batches; `None` runs all epochs.
    pub max_outer_steps: Option<usize>,
    pub advantage: AdvantageScheme,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 16,
            episode_len: 8,
            inner_epochs: 8,
            eps_clip: 0.2,
            lr: 1e-4,
            batch_size: 16,
            epochs: 1,
            max_outer_steps: None,
            advantage: AdvantageScheme::Improvement,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

/// One recorded episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    /// `s_1 .. s_{n+1}`, each `[N, D]`.
    pub states: Vec<Tensor<f32>>,
    pub actions: Vec<GazeCenter>,
    /// Log-density of each action under the policy that sampled it.
    pub old_log_probs: Vec<f64>,
    /// Cross-entropy of the task head on `s_1 .. s_{n+1}`.
    pub losses: Vec<f64>,
    pub final_logits: Vec<f64>,
    /// Top-1 correctness of the head on `s_2 .. s_{n+1}`.
    pub correct: Vec<bool>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

fn row_cross_entropy(row: &[f64], label: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - row[label]
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Rolls out `group` stochastic episodes of length `n` on each image. Trace
/// `j` of image `i` draws from its own stream seeded with
/// `seed ^ (first_trace + i * group + j)`.
#[allow(clippy::too_many_arguments)]
pub fn rollout_batch(
    encoder: &Encoder,
    policy: &Policy,
    store: &ParamStore<f32>,
    images: &[&Image],
    labels: &[usize],
    n: usize,
    group: usize,
    seed: u64,
    first_trace: u64,
) -> Result<Vec<Vec<Trace>>> {
    if n == 0 {
        return Err(ModelError::Config(
            "episode length must be at least 1".into(),
        ));
    }
    if group < 2 {
        return Err(ModelError::Config(format!("group size {group} < 2")));
    }
    let batch = images.len() * group;
    let mut rngs: Vec<ChaCha8Rng> = (0..batch as u64)
        .map(|j| ChaCha8Rng::seed_from_u64(seed ^ (first_trace + j)))
        .collect();
    let expanded: Vec<&Image> = images
        .iter()
        .flat_map(|&img| std::iter::repeat_n(img, group))
        .collect();
    let mut actions: Vec<Vec<GazeCenter>> = vec![Vec::with_capacity(n); batch];
    let mut old_lp: Vec<Vec<f64>> = vec![Vec::with_capacity(n); batch];
    let mut failure = None;
    let ep = encoder.run_episode(store, &expanded, None, n, |_, state| {
        let mixtures = match policy.mixtures(store, state) {
            Ok(m) => m,
            Err(e) => {
                failure.get_or_insert(e);
                return vec![GazeCenter::new(0.5, 0.5); batch];
            }
        };
        mixtures
            .iter()
            .zip(rngs.iter_mut())
            .enumerate()
            .map(|(j, (m, rng))| {
                let a = m.sample(rng);
                actions[j].push(a);
                old_lp[j].push(m.log_prob(a));
                a
            })
            .collect()
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let cfg = encoder.config();
    let (sn, d, k) = (cfg.state_size, cfg.dim, cfg.classes);
    let first_logits = encoder.head_logits(store, ep.state_value(0))?;
    let mut out: Vec<Vec<Trace>> = Vec::with_capacity(images.len());
    for (i, &label) in labels.iter().enumerate() {
        let mut traces = Vec::with_capacity(group);
        for g in 0..group {
            let j = i * group + g;
            let row = |t: &Tensor<f32>| -> Vec<f64> {
                t.data()[j * k..(j + 1) * k]
                    .iter()
                    .map(|&v| v as f64)
                    .collect()
            };
            let mut losses = vec![row_cross_entropy(&row(&first_logits), label)];
            let mut correct = Vec::with_capacity(n);
            let mut last = Vec::new();
            for t in 0..n {
                let r = row(ep.logits_value(t));
                losses.push(row_cross_entropy(&r, label));
                correct.push(argmax(&r) == label);
                last = r;
            }
            let states = (0..=n)
                .map(|t| {
                    let v = ep.state_value(t);
                    let data = v.data()[j * sn * d..(j + 1) * sn * d].to_vec();
                    Tensor::new(&[sn, d], data).expect("sized")
                })
                .collect();
            traces.push(Trace {
                states,
                actions: std::mem::take(&mut actions[j]),
                old_log_probs: std::mem::take(&mut old_lp[j]),
                losses,
                final_logits: last,
                correct,
            });
        }
        out.push(traces);
    }
    Ok(out)
}

/// `G` traces on a single image.
#[allow(clippy::too_many_arguments)]
pub fn rollout_group(
    encoder: &Encoder,
    policy: &Policy,
    store: &ParamStore<f32>,
    image: &Image,
    label: usize,
    n: usize,
    group: usize,
    seed: u64,
) -> Result<Vec<Trace>> {
    Ok(rollout_batch(
        encoder,
        policy,
        store,
        &[image],
        &[label],
        n,
        group,
        seed,
        0,
    )?
    .pop()
    .expect("one image"))
}

/// `α[i][t] = -l_{i,n+1}` for every action of trace `i`.
pub fn advantage_terminal(traces: &[Trace]) -> Vec<Vec<f64>> {
    traces
        .iter()
        .map(|tr| vec![-tr.losses.last().copied().unwrap_or(0.0); tr.len()])
        .collect()
}

/// `(l_t - l_{t+1}) / (l_t + l_{t+1})`, zero when both losses are zero.
pub fn improvement_ratio(before: f64, after: f64) -> f64 {
    let total = before + after;
    if total == 0.0 {
        0.0
    } else {
        (before - after) / total
    }
}

pub fn advantage_improvement(traces: &[Trace]) -> Vec<Vec<f64>> {
    traces
        .iter()
        .map(|tr| {
            tr.losses
                .windows(2)
                .map(|w| improvement_ratio(w[0], w[1]))
                .collect()
        })
        .collect()
}

/// Per-column standardisation with the population standard deviation;
/// columns with spread below `1e-8` become zeros.
pub fn group_normalize(raw: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let g = raw.len();
    if g < 2 {
        return Err(ModelError::Config(format!(
            "group normalisation needs G >= 2, got {g}"
        )));
    }
    let n = raw[0].len();
    if raw.iter().any(|r| r.len() != n) {
        return Err(ModelError::Shape("ragged advantage table".into()));
    }
    let mut out = vec![vec![0.0; n]; g];
    for t in 0..n {
        let mean = raw.iter().map(|r| r[t]).sum::<f64>() / g as f64;
        let var = raw.iter().map(|r| (r[t] - mean).powi(2)).sum::<f64>() / g as f64;
        let std = var.sqrt();
        if std < 1e-8 {
            continue;
        }
        for (o, r) in out.iter_mut().zip(raw) {
            o[t] = (r[t] - mean) / std;
        }
    }
    Ok(out)
}

/// Summary numbers of one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveStats {
    pub objective: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

/// `-mean(min(r·Â, clip(r, 1-ε, 1+ε)·Â))` with `r = exp(new - old)`, all
/// `[G, n]` shaped (row-major). Differentiable in `new_log_probs` only.
pub fn grpo_objective<T: Real>(
    s: &mut Session<'_, T>,
    new_log_probs: Var,
    old_log_probs: &Tensor<T>,
    advantages: &Tensor<T>,
    eps_clip: f64,
) -> Result<(Var, ObjectiveStats)> {
    if !(eps_clip > 0.0 && eps_clip < 1.0) {
        return Err(ModelError::Config(format!(
            "eps_clip {eps_clip} outside (0,1)"
        )));
    }
    let shape = s.graph.shape(new_log_probs).to_vec();
    if old_log_probs.shape() != shape.as_slice() || advantages.shape() != shape.as_slice() {
        return Err(ModelError::Shape(format!(
            "log-probs {shape:?}, old {:?}, advantages {:?}",
            old_log_probs.shape(),
            advantages.shape()
        )));
    }
    let old = s.graph.constant(old_log_probs.clone());
    let adv = s.graph.constant(advantages.clone());
    let diff = s.graph.sub(new_log_probs, old)?;
    let ratio = s.graph.exp(diff);
    let steps = *shape.last().unwrap_or(&1);
    let r = s.value(ratio).data().to_vec();
    if let Some(i) = r.iter().position(|v| v.is_nan()) {
        return Err(ModelError::Config(format!(
            "NaN probability ratio at trace {}, step {}",
            i / steps,
            i % steps
        )));
    }
    let (lo, hi) = (1.0 - eps_clip, 1.0 + eps_clip);
    let unclipped = s.graph.mul(ratio, adv)?;
    let clipped = s.graph.clamp(ratio, T::lit(lo), T::lit(hi));
    let clipped = s.graph.mul(clipped, adv)?;
    let surrogate = s.graph.minimum(unclipped, clipped)?;
    let mean = s.graph.mean(surrogate);
    let loss = s.graph.neg(mean);
    let count = r.len().max(1) as f64;
    let stats = ObjectiveStats {
        objective: s.value(loss).item().as_f64(),
        mean_ratio: r.iter().map(|v| v.as_f64()).sum::<f64>() / count,
        clip_fraction: r
            .iter()
            .filter(|v| {
                let v = v.as_f64();
                v < lo || v > hi
            })
            .count() as f64
            / count,
    };
    Ok((loss, stats))
}

/// One JSON-lines record of stage-2 training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoRecord {
    pub phase: String,
    pub outer_step: usize,
    pub inner_epoch: usize,
    pub objective: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub per_step_accuracy: Vec<f64>,
}

/// Trains the `policy.` parameters of `store` with everything else frozen.
/// Returns the number of outer batches run.
pub fn grpo_train(
    encoder: &Encoder,
    policy: &Policy,
    store: &mut ParamStore<f32>,
    dataset: &LabeledDataset,
    config: &GrpoConfig,
    mut emit: impl FnMut(&GrpoRecord),
) -> Result<usize> {
    if config.batch_size == 0 {
        return Err(ModelError::Config("batch_size must be at least 1".into()));
    }
    let saved: Vec<bool> = store.iter().map(|(_, p)| p.trainable).collect();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for &id in &ids {
        let p = store.get_mut(id);
        p.trainable = p.name.starts_with("policy.");
    }
    let result = train_loop(encoder, policy, store, dataset, config, &mut emit);
    for (id, t) in ids.into_iter().zip(saved) {
        store.get_mut(id).trainable = t;
    }
    result
}

fn train_loop(
    encoder: &Encoder,
    policy: &Policy,
    store: &mut ParamStore<f32>,
    dataset: &LabeledDataset,
    config: &GrpoConfig,
    emit: &mut dyn FnMut(&GrpoRecord),
) -> Result<usize> {
    let (g, n) = (config.group_size, config.episode_len);
    let mut opt = OptimizerState::new(store, config.optimizer);
    let mut outer = 0usize;
    let mut traces_seen = 0u64;
    for epoch in 0..config.epochs {
        let order = crate::data::epoch_order(dataset.len(), config.seed, epoch);
        for chunk in order.chunks(config.batch_size) {
            if config.max_outer_steps.is_some_and(|m| outer >= m) {
                return Ok(outer);
            }
            let images: Vec<&Image> = chunk.iter().map(|&i| &dataset.images[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
            let groups = rollout_batch(
                encoder,
                policy,
                store,
                &images,
                &labels,
                n,
                g,
                config.seed,
                traces_seen,
            )?;
            traces_seen += (images.len() * g) as u64;

            let mut states = Vec::new();
            let mut actions = Vec::new();
            let mut old = Vec::new();
            let mut adv = Vec::new();
            let mut correct = vec![0usize; n];
            for traces in &groups {
                let raw = match config.advantage {
                    AdvantageScheme::Terminal => advantage_terminal(traces),
                    AdvantageScheme::Improvement => advantage_improvement(traces),
                };
                let norm = group_normalize(&raw)?;
                for (tr, a) in traces.iter().zip(norm) {
                    for t in 0..n {
                        states.extend_from_slice(tr.states[t].data());
                        actions.push(tr.actions[t]);
                        old.push(tr.old_log_probs[t] as f32);
                        correct[t] += tr.correct[t] as usize;
                    }
                    adv.extend(a.into_iter().map(|v| v as f32));
                }
            }
            let rows = actions.len();
            let total = (images.len() * g) as f64;
            let per_step_accuracy: Vec<f64> = correct.iter().map(|&c| c as f64 / total).collect();
            let cfg = encoder.config();
            let state_batch = Tensor::new(&[rows, cfg.state_size, cfg.dim], states)?;
            let old = Tensor::new(&[rows / n, n], old)?;
            let adv = Tensor::new(&[rows / n, n], adv)?;

            for inner in 0..config.inner_epochs {
                let (grads, stats) = {
                    let mut s = Session::new(store);
                    let x = s.graph.constant(state_batch.clone());
                    let (means, logits) = policy.forward(&mut s, x)?;
                    let lp = policy.log_prob(&mut s, means, logits, &actions)?;
                    let lp = s.graph.reshape(lp, &[rows / n, n])?;
                    let (loss, stats) = grpo_objective(&mut s, lp, &old, &adv, config.eps_clip)?;
                    if !stats.objective.is_finite() {
                        return Err(ModelError::Config(format!(
                            "non-finite objective at outer step {outer}, inner epoch {inner}"
                        )));
                    }
                    (s.backward(loss)?, stats)
                };
                opt.step(store, &grads, config.lr)?;
                emit(&GrpoRecord {
                    phase: "stage2".into(),
                    outer_step: outer,
                    inner_epoch: inner,
                    objective: stats.objective,
                    mean_ratio: stats.mean_ratio,
                    clip_fraction: stats.clip_fraction,
                    per_step_accuracy: per_step_accuracy.clone(),
                });
            }
            outer += 1;
        }
    }
    Ok(outer)
}

/// Deterministic actions for a batch of states.
pub fn deterministic_actions(mixtures: &[MixtureParams]) -> Vec<GazeCenter> {
    mixtures.iter().map(MixtureParams::deterministic).collect()
}

/// Uniformly random centers.
pub fn random_centers<R: Rng>(rng: &mut R, count: usize) -> Vec<GazeCenter> {
    (0..count)
        .map(|_| GazeCenter::new(rng.gen(), rng.gen()))
        .collect()
}

#[cfg(test)]
mod tests;
