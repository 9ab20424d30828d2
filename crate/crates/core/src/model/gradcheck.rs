use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Session};
use crate::tensor::{ParamStore, Var};

/// Outcome of a central-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|a - n| / max(|a|, |n|, 1e-6)` seen.
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares the backward pass of `loss` against central differences for up
/// to `per_param` randomly chosen entries of every trainable parameter.
pub fn check_param_gradients(
    store: &ParamStore<f64>,
    per_param: usize,
    seed: u64,
    h: f64,
    loss: impl Fn(&mut Session<'_, f64>) -> Result<Var>,
) -> Result<GradCheck> {
    let analytic = {
        let mut s = Session::new(store);
        let l = loss(&mut s)?;
        s.backward(l)?
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut s = Session::new(store);
        let l = loss(&mut s)?;
        Ok(s.value(l).item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.value.numel(), p.name.clone()))
        .collect();
    for (id, n, name) in ids {
        for j in sample(&mut rng, n, per_param.min(n)) {
            let orig = work.value(id).data()[j];
            work.get_mut(id).value.data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g[j]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if err > out.max_rel_error {
                out.max_rel_error = err;
                out.worst = Some((name.clone(), j));
            }
            out.checked += 1;
        }
    }
    Ok(out)
}
