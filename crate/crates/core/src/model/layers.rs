//! Parameter registration and the small layer building blocks shared by the
//! encoder, the task head and the gaze policy.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelError, Session};
use crate::tensor::{ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Normal(f64),
    Const(f64),
}

/// Either creates parameters or looks up existing ones by name, so that one
/// description of a network serves both fresh initialisation and reattaching
/// to a loaded store.
pub(crate) trait Registry {
    fn param(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        decay: bool,
    ) -> Result<ParamId, ModelError>;
}

pub(crate) struct Creator<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Real, R: Rng> Registry for Creator<'_, T, R> {
    fn param(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        decay: bool,
    ) -> Result<ParamId, ModelError> {
        if self.store.id(name).is_some() {
            return Err(ModelError::Config(format!(
                "parameter `{name}` already exists"
            )));
        }
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| T::lit(dist.sample(self.rng))).collect()
            }
            Init::Const(v) => vec![T::lit(v); n],
        };
        Ok(self.store.add(name, Tensor::new(shape, data)?, decay))
    }
}

pub(crate) struct Finder<'a, T> {
    pub store: &'a ParamStore<T>,
}

impl<T: Real> Registry for Finder<'_, T> {
    fn param(
        &mut self,
        name: &str,
        shape: &[usize],
        _: Init,
        _: bool,
    ) -> Result<ParamId, ModelError> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        let found = self.store.value(id).shape();
        if found != shape {
            return Err(ModelError::ParamShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: found.to_vec(),
            });
        }
        Ok(id)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(
        reg: &mut dyn Registry,
        name: &str,
        input: usize,
        output: usize,
    ) -> Result<Self, ModelError> {
        Self::with_std(reg, name, input, output, (1.0 / input as f64).sqrt())
    }

    pub fn with_std(
        reg: &mut dyn Registry,
        name: &str,
        input: usize,
        output: usize,
        std: f64,
    ) -> Result<Self, ModelError> {
        Self::with_init(
            reg,
            name,
            input,
            output,
            Init::Normal(std),
            Init::Const(0.0),
        )
    }

    pub fn with_init(
        reg: &mut dyn Registry,
        name: &str,
        input: usize,
        output: usize,
        w: Init,
        b: Init,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            w: reg.param(&format!("{name}.w"), &[input, output], w, true)?,
            b: reg.param(&format!("{name}.b"), &[output], b, false)?,
        })
    }

    /// `x @ w + b` over the last axis of `x`.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, ModelError> {
        let (w, b) = (s.param(self.w), s.param(self.b));
        let shape = s.graph.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        let rows = shape.iter().product::<usize>() / d.max(1);
        let flat = s.graph.reshape(x, &[rows, d])?;
        let y = s.graph.matmul(flat, w)?;
        let y = s.graph.add(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = s.graph.shape(w)[1];
        Ok(s.graph.reshape(y, &out_shape)?)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    g: ParamId,
    b: ParamId,
}

impl LayerNorm {
    pub fn new(reg: &mut dyn Registry, name: &str, dim: usize) -> Result<Self, ModelError> {
        Ok(Self {
            g: reg.param(&format!("{name}.g"), &[dim], Init::Const(1.0), false)?,
            b: reg.param(&format!("{name}.b"), &[dim], Init::Const(0.0), false)?,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, ModelError> {
        let (g, b) = (s.param(self.g), s.param(self.b));
        Ok(s.graph.layer_norm(x, g, b, 1e-5)?)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub(crate) struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(
        reg: &mut dyn Registry,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            fc1: Linear::new(reg, &format!("{name}.fc1"), input, hidden)?,
            fc2: Linear::new(reg, &format!("{name}.fc2"), hidden, output)?,
        })
    }

    pub fn from_parts(fc1: Linear, fc2: Linear) -> Self {
        Self { fc1, fc2 }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var, ModelError> {
        let h = self.fc1.forward(s, x)?;
        let h = s.graph.gelu(h);
        self.fc2.forward(s, h)
    }
}

/// Multi-head scaled dot-product attention of `[B, Tq, D]` queries over
/// `[B, Tk, D]` keys/values.
#[derive(Clone, Debug)]
pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(
        reg: &mut dyn Registry,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            q: Linear::new(reg, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(reg, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(reg, &format!("{name}.v"), dim, dim)?,
            o: Linear::new(reg, &format!("{name}.o"), dim, dim)?,
            heads,
        })
    }

    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        xq: Var,
        xkv: Var,
    ) -> Result<Var, ModelError> {
        let (b, tq, d) = dims3(s, xq)?;
        let tk = s.graph.shape(xkv)[1];
        let h = self.heads;
        let dh = d / h;
        let q = self.q.forward(s, xq)?;
        let k = self.k.forward(s, xkv)?;
        let v = self.v.forward(s, xkv)?;
        let split = |s: &mut Session<'_, T>, x, t| -> Result<_, ModelError> {
            let x = s.graph.reshape(x, &[b, t, h, dh])?;
            let x = s.graph.permute(x, &[0, 2, 1, 3])?;
            Ok(s.graph.reshape(x, &[b * h, t, dh])?)
        };
        let q = split(s, q, tq)?;
        let k = split(s, k, tk)?;
        let v = split(s, v, tk)?;
        let kt = s.graph.transpose(k)?;
        let scores = s.graph.matmul(q, kt)?;
        let scores = s.graph.scale(scores, T::lit(1.0 / (dh as f64).sqrt()));
        let attn = s.graph.softmax(scores, 2)?;
        let out = s.graph.matmul(attn, v)?;
        let out = s.graph.reshape(out, &[b, h, tq, dh])?;
        let out = s.graph.permute(out, &[0, 2, 1, 3])?;
        let out = s.graph.reshape(out, &[b, tq, d])?;
        self.o.forward(s, out)
    }
}

pub(crate) fn dims3<T: Real>(
    s: &Session<'_, T>,
    x: Var,
) -> Result<(usize, usize, usize), ModelError> {
    match *s.graph.shape(x) {
        [a, b, c] => Ok((a, b, c)),
        ref other => Err(ModelError::Shape(format!(
            "expected a rank-3 tensor, got {other:?}"
        ))),
    }
}
