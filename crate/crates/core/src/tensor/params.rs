use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Real, Tensor, TensorError};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Frozen parameters are bound as constants and skipped by the optimizer.
    pub trainable: bool,
    /// Whether decoupled weight decay applies (matrices yes, biases and norms no).
    pub decay: bool,
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter. Panics on a duplicate name, which is a
    /// programming error in model construction.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable: true,
            decay,
        });
        ParamId(id)
    }

    /// Registers a weight drawn from `N(0, std²)`; subject to weight decay.
    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
        self.add(name, Tensor::new(shape, data).expect("shape"), true)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, T::lit(value)), false)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Sets `trainable` on every parameter whose name starts with `prefix`.
    /// Returns how many matched.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut hits = 0;
        for p in self
            .params
            .iter_mut()
            .filter(|p| p.name.starts_with(prefix))
        {
            p.trainable = trainable;
            hits += 1;
        }
        hits
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Copies values of every parameter present in `other` (same name and shape).
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<(), TensorError> {
        for (_, src) in other.iter() {
            let Some(id) = self.id(&src.name) else {
                return Err(TensorError::Invalid {
                    op: "copy_from",
                    msg: format!("unknown parameter `{}`", src.name),
                });
            };
            let dst = &mut self.params[id.0];
            if dst.value.shape() != src.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "copy_from",
                    lhs: dst.value.shape().to_vec(),
                    rhs: src.value.shape().to_vec(),
                });
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// A copy of the store in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let id = out.add(p.name.clone(), p.value.cast(), p.decay);
            out.params[id.0].trainable = p.trainable;
        }
        out
    }
}

/// Gradients keyed by parameter, detached from any graph.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    pub(crate) grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn empty(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[T]) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, &g)| *a += g),
            slot => *slot = Some(grad.to_vec()),
        }
    }

    /// Adds another set of gradients, e.g. from a separate graph.
    pub fn add(&mut self, other: &ParamGrads<T>) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}
