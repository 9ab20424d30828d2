//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::{ParamGrads, ParamStore, Real, Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First/second moment estimates for every parameter of one store.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| vec![T::zero(); p.value.numel()])
                .collect::<Vec<_>>()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, index: usize) -> &[T] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[T] {
        &self.v[index]
    }

    /// One update with learning rate `lr`. Missing gradients count as zero.
    /// A non-finite gradient rejects the whole step before anything changes.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &ParamGrads<T>,
        lr: f64,
    ) -> Result<()> {
        if lr < 0.0 {
            return Err(TensorError::Invalid {
                op: "adamw_step",
                msg: format!("negative learning rate {lr}"),
            });
        }
        if self.m.len() != store.len() {
            return Err(TensorError::Invalid {
                op: "adamw_step",
                msg: format!(
                    "state tracks {} params, store has {}",
                    self.m.len(),
                    store.len()
                ),
            });
        }
        for (id, p) in store.iter() {
            if let Some(g) = grads.get(id) {
                if g.len() != p.value.numel() {
                    return Err(TensorError::DataLength {
                        shape: p.value.shape().to_vec(),
                        expected: p.value.numel(),
                        actual: g.len(),
                    });
                }
                if p.trainable && g.iter().any(|x| !x.is_finite()) {
                    return Err(TensorError::NonFiniteGradient(p.name.clone()));
                }
            }
        }

        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);

        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let i = id.index();
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let decay = if p.decay {
                T::lit(1.0 - lr * c.weight_decay)
            } else {
                T::one()
            };
            let g = grads.get(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                *w = *w * decay - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`OptimizerState::step`].
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &ParamGrads<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    state.step(store, grads, lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamId, Tensor};

    fn store() -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(
            "w",
            Tensor::from_f64(&[2, 2], &[1.0, -2.0, 0.5, 3.0]).unwrap(),
            true,
        );
        (s, id)
    }

    fn grads(id: ParamId, g: &[f64]) -> ParamGrads<f64> {
        let mut out = ParamGrads::empty(1);
        out.accumulate(id, g);
        out
    }

    #[test]
    fn zero_grads_without_decay_leave_params() {
        let (mut s, id) = store();
        let before = s.value(id).clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimizerState::new(&s, cfg);
        st.step(&mut s, &grads(id, &[0.0; 4]), 1e-2).unwrap();
        assert_eq!(s.value(id), &before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let (mut s, id) = store();
        let before = s.value(id).clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            eps: 0.0,
            ..Default::default()
        };
        let mut st = OptimizerState::new(&s, cfg);
        let g = [0.3, -4.0, 1e-3, -0.2];
        st.step(&mut s, &grads(id, &g), 0.01).unwrap();
        // With zero moments the bias-corrected update is exactly lr * sign(g).
        for j in 0..4 {
            let delta = s.value(id).data()[j] - before.data()[j];
            assert!((delta + 0.01 * g[j].signum()).abs() < 1e-12, "{delta}");
        }
    }

    #[test]
    fn decay_alone_scales_params() {
        let (mut s, id) = store();
        let before = s.value(id).clone();
        let mut st = OptimizerState::new(&s, AdamWConfig::default());
        let (lr, wd) = (0.1, 0.05);
        st.step(&mut s, &grads(id, &[0.0; 4]), lr).unwrap();
        for (a, b) in s.value(id).data().iter().zip(before.data()) {
            assert!((a - b * (1.0 - lr * wd)).abs() < 1e-15);
        }
    }

    #[test]
    fn nan_gradient_is_rejected_untouched() {
        let (mut s, id) = store();
        let before = s.value(id).clone();
        let mut st = OptimizerState::new(&s, AdamWConfig::default());
        let err = st
            .step(&mut s, &grads(id, &[0.0, f64::NAN, 0.0, 0.0]), 0.1)
            .unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient("w".into()));
        assert_eq!(s.value(id), &before);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn frozen_params_are_skipped() {
        let (mut s, id) = store();
        s.set_trainable("w", false);
        let before = s.value(id).clone();
        let mut st = OptimizerState::new(&s, AdamWConfig::default());
        st.step(&mut s, &grads(id, &[1.0; 4]), 0.1).unwrap();
        assert_eq!(s.value(id), &before);
    }
}
