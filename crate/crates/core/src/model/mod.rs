//! The iterative encoder.
//!
//! Each step takes the current `N×D` state and one glimpse of `M` patch
//! tokens, runs `L` pre-norm transformer blocks over the `N+M` sequence and
//! keeps only the first `N` rows as the next state. The state that entered the
//! step is layer-normalised and re-injected at the state positions of every
//! block's attention input. Between steps the state is detached, so a step's loss only trains
//! that step's computation.
//!
//! Parameters live in a shared [`ParamStore`] under the `encoder.` and `head.`
//! prefixes; the gaze policy uses `policy.`.

mod checkpoint;
mod glimpse;
mod gradcheck;
pub(crate) mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_MAGIC,
};
pub use glimpse::{grid_zoom, Glimpses};
pub use gradcheck::{check_param_gradients, GradCheck};
use layers::{Attention, Creator, Finder, Init, LayerNorm, Linear, Mlp, Registry};

use crate::patchify::{GazeCenter, Image, PatchError};
use crate::tensor::{Graph, ParamGrads, ParamId, ParamStore, Real, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("position input {index} is {value}, outside [0,1]")]
    PositionOutOfRange { index: usize, value: f64 },
    #[error("parameter `{0}` not found")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    /// N, the number of state vectors.
    pub state_size: usize,
    pub patch_size: usize,
    /// M, patches per glimpse.
    pub patch_count: usize,
    pub classes: usize,
    pub mlp_ratio: usize,
    pub pos_hidden: usize,
    pub head_hidden: usize,
    pub max_zoom: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 128,
            heads: 4,
            state_size: 8,
            patch_size: 16,
            patch_count: 8,
            classes: 10,
            mlp_ratio: 2,
            pos_hidden: 64,
            head_hidden: 128,
            max_zoom: 4.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            ));
        }
        for (name, v) in [
            ("dim", self.dim),
            ("state_size", self.state_size),
            ("patch_size", self.patch_size),
            ("patch_count", self.patch_count),
            ("classes", self.classes),
            ("mlp_ratio", self.mlp_ratio),
            ("pos_hidden", self.pos_hidden),
            ("head_hidden", self.head_hidden),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if !(self.max_zoom >= 0.0) {
            return fail(format!("max_zoom {} must be >= 0", self.max_zoom));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// One forward/backward pass: a fresh graph plus a cache of the parameters
/// already bound into it.
pub struct Session<'a, T: Real> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let v = self.graph.param(self.store, id);
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn value(&self, x: Var) -> &Tensor<T> {
        self.graph.value(x)
    }

    pub fn backward(&mut self, loss: Var) -> Result<ParamGrads<T>> {
        Ok(self.graph.backward(loss)?.into_params())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

/// Encoder, positional embedding and classification head.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    prompt: ParamId,
    patch: Linear,
    pos: Mlp,
    skip_norm: LayerNorm,
    blocks: Vec<Block>,
    pool: ParamId,
    head_norm: LayerNorm,
    head: Mlp,
}

impl Encoder {
    /// Registers freshly initialised parameters in `store`.
    pub fn new<T: Real, R: Rng>(
        config: EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(config, &mut Creator { store, rng })
    }

    /// Looks up the parameters of an existing store (e.g. a loaded checkpoint).
    pub fn attach<T: Real>(config: EncoderConfig, store: &ParamStore<T>) -> Result<Self> {
        Self::build(config, &mut Finder { store })
    }

    fn build(config: EncoderConfig, reg: &mut dyn Registry) -> Result<Self> {
        config.validate()?;
        let (d, n) = (config.dim, config.state_size);
        let prompt = reg.param("encoder.prompt", &[n, d], Init::Normal(1.0), false)?;
        let patch = Linear::new(reg, "encoder.patch", config.patch_len(), d)?;
        let pos = Mlp::from_parts(
            Linear::with_init(
                reg,
                "encoder.pos.fc1",
                3,
                config.pos_hidden,
                Init::Normal(3.0),
                Init::Normal(1.0),
            )?,
            Linear::with_init(
                reg,
                "encoder.pos.fc2",
                config.pos_hidden,
                d,
                Init::Normal(0.02),
                Init::Const(0.0),
            )?,
        );
        let skip_norm = LayerNorm::new(reg, "encoder.skip_norm", d)?;
        let blocks = (0..config.layers)
            .map(|i| {
                let name = format!("encoder.blocks.{i}");
                Ok(Block {
                    ln1: LayerNorm::new(reg, &format!("{name}.ln1"), d)?,
                    attn: Attention::new(reg, &format!("{name}.attn"), d, config.heads)?,
                    ln2: LayerNorm::new(reg, &format!("{name}.ln2"), d)?,
                    mlp: Mlp::new(reg, &format!("{name}.mlp"), d, d * config.mlp_ratio, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pool = reg.param("head.pool", &[n], Init::Const(1.0 / n as f64), false)?;
        let head_norm = LayerNorm::new(reg, "head.norm", d)?;
        let head = Mlp::new(reg, "head.mlp", d, config.head_hidden, config.classes)?;
        Ok(Self {
            config,
            prompt,
            patch,
            pos,
            skip_norm,
            blocks,
            pool,
            head_norm,
            head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// The task prompt broadcast to `[batch, N, D]`.
    pub fn initial_state<T: Real>(&self, s: &mut Session<'_, T>, batch: usize) -> Result<Var> {
        let p = s.param(self.prompt);
        let zeros = s.graph.constant(Tensor::zeros(&[
            batch,
            self.config.state_size,
            self.config.dim,
        ]));
        Ok(s.graph.add(zeros, p)?)
    }

    /// `[R, 3]` coordinates to `[R, D]` embeddings.
    pub fn pos_embed<T: Real>(&self, s: &mut Session<'_, T>, coords: Var) -> Result<Var> {
        match *s.graph.shape(coords) {
            [_, 3] => {}
            ref other => {
                return Err(ModelError::Shape(format!(
                    "coords {other:?}, expected [R, 3]"
                )))
            }
        }
        if let Some((i, v)) = s
            .graph
            .value(coords)
            .data()
            .iter()
            .map(|v| v.as_f64())
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(v))
        {
            return Err(ModelError::PositionOutOfRange { index: i, value: v });
        }
        self.pos.forward(s, coords)
    }

    /// Patch projection plus positional embedding, `[B, T, D]`.
    pub fn tokenize<T: Real>(&self, s: &mut Session<'_, T>, glimpses: &Glimpses<T>) -> Result<Var> {
        let len = self.config.patch_len();
        if glimpses.patches.shape() != [glimpses.batch * glimpses.tokens, len] {
            return Err(ModelError::Shape(format!(
                "patches {:?}, expected [{}, {len}]",
                glimpses.patches.shape(),
                glimpses.batch * glimpses.tokens
            )));
        }
        let x = s.graph.constant(glimpses.patches.clone());
        let c = s.graph.constant(glimpses.coords.clone());
        let tok = self.patch.forward(s, x)?;
        let pos = self.pos_embed(s, c)?;
        let tok = s.graph.add(tok, pos)?;
        Ok(s.graph
            .reshape(tok, &[glimpses.batch, glimpses.tokens, self.config.dim])?)
    }

    /// One encoder iteration: `[B, N, D]` state and `[B, T, D]` tokens to the
    /// next `[B, N, D]` state.
    pub fn step<T: Real>(&self, s: &mut Session<'_, T>, state: Var, tokens: Var) -> Result<Var> {
        let (b, n, d) = layers::dims3(s, state)?;
        let (bt, t, dt) = layers::dims3(s, tokens)?;
        if (n, d) != (self.config.state_size, self.config.dim) || (bt, dt) != (b, d) {
            return Err(ModelError::Shape(format!(
                "state [{b}, {n}, {d}] and tokens [{bt}, {t}, {dt}] for N={} D={}",
                self.config.state_size, self.config.dim
            )));
        }
        let mut x = s.graph.concat(&[state, tokens], 1)?;
        let zeros = s.graph.constant(Tensor::zeros(&[b, t, d]));
        let injected = self.skip_norm.forward(s, state)?;
        let skip = s.graph.concat(&[injected, zeros], 1)?;
        for blk in &self.blocks {
            let a = blk.ln1.forward(s, x)?;
            let a = s.graph.add(a, skip)?;
            let a = blk.attn.forward(s, a, a)?;
            x = s.graph.add(x, a)?;
            let m = blk.ln2.forward(s, x)?;
            let m = blk.mlp.forward(s, m)?;
            x = s.graph.add(x, m)?;
        }
        Ok(s.graph.slice(x, 1, 0, n)?)
    }

    /// Learned weighted sum of the state vectors, then LayerNorm and an MLP
    /// to `[B, K]` logits.
    pub fn task_head<T: Real>(&self, s: &mut Session<'_, T>, state: Var) -> Result<Var> {
        let (b, n, d) = layers::dims3(s, state)?;
        let w = s.param(self.pool);
        let w = s.graph.reshape(w, &[n, 1])?;
        let st = s.graph.permute(state, &[0, 2, 1])?;
        let pooled = s.graph.matmul(st, w)?;
        let pooled = s.graph.reshape(pooled, &[b, d])?;
        let h = self.head_norm.forward(s, pooled)?;
        self.head.forward(s, h)
    }

    /// Runs `steps` iterations on a batch. `input(t, state)` produces the
    /// glimpses of step `t` (0-based) from the current state values.
    pub fn run_steps<'a, T: Real>(
        &self,
        store: &'a ParamStore<T>,
        batch: usize,
        targets: Option<&Tensor<T>>,
        steps: usize,
        mut input: impl FnMut(usize, &Tensor<T>) -> Result<Glimpses<T>>,
    ) -> Result<Episode<'a, T>> {
        if steps == 0 {
            return Err(ModelError::Config(
                "an episode needs at least one step".into(),
            ));
        }
        let mut s = Session::new(store);
        let mut state = self.initial_state(&mut s, batch)?;
        let mut ep = Episode {
            states: vec![state],
            logits: Vec::with_capacity(steps),
            losses: Vec::with_capacity(steps),
            loss: None,
            session: s,
        };
        for t in 0..steps {
            let s = &mut ep.session;
            let glimpses = input(t, s.graph.value(state))?;
            if glimpses.batch != batch {
                return Err(ModelError::Shape(format!(
                    "step {t} produced {} glimpses for a batch of {batch}",
                    glimpses.batch
                )));
            }
            let tokens = self.tokenize(s, &glimpses)?;
            let input_state = if t == 0 { state } else { s.graph.detach(state) };
            state = self.step(s, input_state, tokens)?;
            let logits = self.task_head(s, state)?;
            if let Some(y) = targets {
                let l = s.graph.cross_entropy(logits, y)?;
                ep.losses.push(l);
            }
            ep.states.push(state);
            ep.logits.push(logits);
        }
        if !ep.losses.is_empty() {
            let s = &mut ep.session;
            let parts: Vec<Var> = ep
                .losses
                .iter()
                .map(|&l| s.graph.reshape(l, &[1]))
                .collect::<std::result::Result<_, _>>()?;
            let all = s.graph.concat(&parts, 0)?;
            ep.loss = Some(s.graph.mean(all));
        }
        Ok(ep)
    }

    /// Multi-zoom episode; `gaze(t, state)` picks each image's center for
    /// step `t`.
    pub fn run_episode<'a, T: Real>(
        &self,
        store: &'a ParamStore<T>,
        images: &[&Image],
        targets: Option<&Tensor<T>>,
        steps: usize,
        mut gaze: impl FnMut(usize, &Tensor<T>) -> Vec<GazeCenter>,
    ) -> Result<Episode<'a, T>> {
        self.run_steps(store, images.len(), targets, steps, |t, state| {
            let centers = gaze(t, state);
            Glimpses::multizoom(images, &centers, &self.config)
        })
    }

    /// Single pass over every grid tile of each image: the full-attention
    /// baseline, expressed as a one-step episode.
    pub fn vit_forward<'a, T: Real>(
        &self,
        store: &'a ParamStore<T>,
        images: &[&Image],
        targets: Option<&Tensor<T>>,
    ) -> Result<Episode<'a, T>> {
        let glimpses = Glimpses::grid(images, None, &self.config)?;
        self.run_steps(store, images.len(), targets, 1, |_, _| Ok(glimpses.clone()))
    }

    /// Logits of an arbitrary state value (no gradient).
    pub fn head_logits<T: Real>(
        &self,
        store: &ParamStore<T>,
        state: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut s = Session::new(store);
        let x = s.graph.constant(state.clone());
        let l = self.task_head(&mut s, x)?;
        Ok(s.graph.value(l).clone())
    }
}

/// Record of one episode. `states` has `n + 1` entries starting with the
/// prompt; `logits` and `losses` have one per glimpse.
pub struct Episode<'a, T: Real> {
    pub session: Session<'a, T>,
    pub states: Vec<Var>,
    pub logits: Vec<Var>,
    pub losses: Vec<Var>,
    /// Mean of the per-step losses.
    pub loss: Option<Var>,
}

impl<T: Real> Episode<'_, T> {
    pub fn logits_value(&self, step: usize) -> &Tensor<T> {
        self.session.graph.value(self.logits[step])
    }

    pub fn state_value(&self, index: usize) -> &Tensor<T> {
        self.session.graph.value(self.states[index])
    }

    pub fn loss_value(&self) -> Option<f64> {
        self.loss
            .map(|l| self.session.graph.value(l).item().as_f64())
    }

    pub fn step_losses(&self) -> Vec<f64> {
        self.losses
            .iter()
            .map(|&l| self.session.graph.value(l).item().as_f64())
            .collect()
    }

    pub fn backward(&mut self) -> Result<ParamGrads<T>> {
        let loss = self
            .loss
            .ok_or_else(|| ModelError::Config("episode ran without targets".into()))?;
        self.session.backward(loss)
    }
}

/// Whether each row's label is among the `k` largest logits (ties broken
/// towards the label losing).
pub fn top_k_hits<T: Real>(logits: &Tensor<T>, labels: &[usize], k: usize) -> Vec<bool> {
    let classes = *logits.shape().last().unwrap_or(&1);
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let target = row[y];
            let above = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| j != y && v >= target)
                .count();
            above < k
        })
        .collect()
}

/// One-hot rows as a `[labels.len(), classes]` tensor.
pub fn one_hot_targets<T: Real>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        data[i * classes + y] = T::one();
    }
    Tensor::new(&[labels.len(), classes], data).expect("sized")
}
