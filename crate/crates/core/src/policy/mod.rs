//! Gaze policy: learned queries cross-attend to the encoder state and produce
//! a Gaussian mixture over the next gaze center.

use rand::Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::model::layers::{
    dims3, Attention, Creator, Finder, Init, LayerNorm, Linear, Mlp, Registry,
};
use crate::model::{ModelError, Result, Session};
use crate::patchify::GazeCenter;
use crate::tensor::{ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Mixture components.
    pub components: usize,
    /// Fixed standard deviation of every component, in unit-square units.
    pub sigma: f64,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            components: 4,
            sigma: 0.1,
            heads: 2,
            mlp_ratio: 2,
        }
    }
}

/// Mixture for one state.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams {
    pub means: Vec<[f64; 2]>,
    pub logits: Vec<f64>,
    pub sigma: f64,
}

impl MixtureParams {
    pub fn weights(&self) -> Vec<f64> {
        let max = self
            .logits
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    /// Component from the softmax of the logits, then a Gaussian draw around
    /// its mean, clamped into the unit square.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> GazeCenter {
        let c = WeightedIndex::new(self.weights())
            .expect("finite weights")
            .sample(rng);
        let [mx, my] = self.means[c];
        if self.sigma <= 0.0 {
            return GazeCenter::new(mx, my);
        }
        let n = Normal::new(0.0, self.sigma).expect("positive sigma");
        GazeCenter::new(mx + n.sample(rng), my + n.sample(rng))
    }

    /// Mean of the most probable component; the lowest index wins ties.
    pub fn deterministic(&self) -> GazeCenter {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        let [x, y] = self.means[best];
        GazeCenter::new(x, y)
    }

    /// `log Σ_c w_c N(a; μ_c, σ²I)` of the unclamped mixture.
    pub fn log_prob(&self, action: GazeCenter) -> f64 {
        let lw: Vec<f64> = {
            let max = self
                .logits
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + self
                    .logits
                    .iter()
                    .map(|l| (l - max).exp())
                    .sum::<f64>()
                    .ln();
            self.logits.iter().map(|l| l - lse).collect()
        };
        let s2 = self.sigma * self.sigma;
        let norm = -(2.0 * std::f64::consts::PI * s2).ln();
        let terms: Vec<f64> = self
            .means
            .iter()
            .zip(&lw)
            .map(|(&[mx, my], w)| {
                let d2 = (action.x() - mx).powi(2) + (action.y() - my).powi(2);
                w + norm - d2 / (2.0 * s2)
            })
            .collect();
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }
}

#[derive(Clone, Debug)]
pub struct Policy {
    config: PolicyConfig,
    dim: usize,
    queries: ParamId,
    state_norm: LayerNorm,
    query_norm: LayerNorm,
    attn: Attention,
    mlp_norm: LayerNorm,
    mlp: Mlp,
    mean_head: Linear,
    logit_head: Linear,
}

impl Policy {
    pub fn new<T: Real, R: Rng>(
        config: PolicyConfig,
        dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(config, dim, &mut Creator { store, rng })
    }

    pub fn attach<T: Real>(
        config: PolicyConfig,
        dim: usize,
        store: &ParamStore<T>,
    ) -> Result<Self> {
        Self::build(config, dim, &mut Finder { store })
    }

    fn build(config: PolicyConfig, dim: usize, reg: &mut dyn Registry) -> Result<Self> {
        if config.components == 0 {
            return Err(ModelError::Config(
                "policy needs at least one component".into(),
            ));
        }
        if !(config.sigma > 0.0) {
            return Err(ModelError::Config(format!(
                "policy sigma {} must be > 0",
                config.sigma
            )));
        }
        if config.heads == 0 || !dim.is_multiple_of(config.heads) {
            return Err(ModelError::Config(format!(
                "dim {dim} not divisible by policy heads {}",
                config.heads
            )));
        }
        let k = config.components;
        Ok(Self {
            queries: reg.param("policy.queries", &[k + 1, dim], Init::Normal(1.0), false)?,
            state_norm: LayerNorm::new(reg, "policy.state_norm", dim)?,
            query_norm: LayerNorm::new(reg, "policy.query_norm", dim)?,
            attn: Attention::new(reg, "policy.attn", dim, config.heads)?,
            mlp_norm: LayerNorm::new(reg, "policy.mlp_norm", dim)?,
            mlp: Mlp::new(reg, "policy.mlp", dim, dim * config.mlp_ratio.max(1), dim)?,
            mean_head: Linear::new(reg, "policy.mean", dim, 2)?,
            logit_head: Linear::new(reg, "policy.logits", dim, k)?,
            dim,
            config,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    /// `[B, N, D]` state to mixture means `[B, K, 2]` (in `(0,1)`) and
    /// component logits `[B, K]`.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, state: Var) -> Result<(Var, Var)> {
        let (b, _, d) = dims3(s, state)?;
        if d != self.dim {
            return Err(ModelError::Shape(format!(
                "state dim {d}, policy expects {}",
                self.dim
            )));
        }
        let k = self.config.components;
        let q = s.param(self.queries);
        let zeros = s.graph.constant(Tensor::zeros(&[b, k + 1, d]));
        let q = s.graph.add(zeros, q)?;
        let kv = self.state_norm.forward(s, state)?;
        let qn = self.query_norm.forward(s, q)?;
        let a = self.attn.forward(s, qn, kv)?;
        let x = s.graph.add(q, a)?;
        let m = self.mlp_norm.forward(s, x)?;
        let m = self.mlp.forward(s, m)?;
        let x = s.graph.add(x, m)?;
        let comp = s.graph.slice(x, 1, 0, k)?;
        let means = self.mean_head.forward(s, comp)?;
        let means = s.graph.sigmoid(means);
        let sel = s.graph.slice(x, 1, k, k + 1)?;
        let sel = s.graph.reshape(sel, &[b, d])?;
        let logits = self.logit_head.forward(s, sel)?;
        Ok((means, logits))
    }

    /// Mixture parameters for each state in a `[B, N, D]` batch, without
    /// recording gradients.
    pub fn mixtures<T: Real>(
        &self,
        store: &ParamStore<T>,
        state: &Tensor<T>,
    ) -> Result<Vec<MixtureParams>> {
        let mut s = Session::new(store);
        let x = s.graph.constant(state.clone());
        let (means, logits) = self.forward(&mut s, x)?;
        Ok(unpack(
            s.value(means),
            s.value(logits),
            self.config.components,
            self.config.sigma,
        ))
    }

    /// Differentiable `[B]` log-densities of `actions` under the mixtures of
    /// `forward`.
    pub fn log_prob<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        means: Var,
        logits: Var,
        actions: &[GazeCenter],
    ) -> Result<Var> {
        let b = actions.len();
        let sigma = self.config.sigma;
        let a = Tensor::new(
            &[b, 1, 2],
            actions
                .iter()
                .flat_map(|c| [T::lit(c.x()), T::lit(c.y())])
                .collect(),
        )?;
        let a = s.graph.constant(a);
        let diff = s.graph.sub(means, a)?;
        let sq = s.graph.square(diff);
        let d2 = s.graph.sum_axis(sq, 2)?;
        let log_n = s.graph.scale(d2, T::lit(-1.0 / (2.0 * sigma * sigma)));
        let log_n = s.graph.add_scalar(
            log_n,
            T::lit(-(2.0 * std::f64::consts::PI * sigma * sigma).ln()),
        );
        let log_w = s.graph.log_softmax(logits, 1)?;
        let joint = s.graph.add(log_w, log_n)?;
        Ok(s.graph.logsumexp(joint, 1)?)
    }
}

fn unpack<T: Real>(
    means: &Tensor<T>,
    logits: &Tensor<T>,
    k: usize,
    sigma: f64,
) -> Vec<MixtureParams> {
    let b = logits.shape()[0];
    (0..b)
        .map(|i| MixtureParams {
            means: (0..k)
                .map(|c| {
                    let o = (i * k + c) * 2;
                    [means.data()[o].as_f64(), means.data()[o + 1].as_f64()]
                })
                .collect(),
            logits: logits.data()[i * k..(i + 1) * k]
                .iter()
                .map(|v| v.as_f64())
                .collect(),
            sigma,
        })
        .collect()
}
