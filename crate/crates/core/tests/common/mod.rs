//! Oracles shared by the integration tests. Nothing here calls the library's
//! own checking helpers.

#![allow(dead_code)]

use foveate::patchify::{GazeCenter, Image};
use foveate::tensor::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

pub mod ops;

pub const FD_STEP: f64 = 1e-5;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn randn<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Contracts `out` with a fixed random tensor so every output entry gets a
/// distinct sensitivity.
fn project(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Var {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

/// Largest relative error between backward and central differences over
/// every entry of every input of `f`.
pub fn check_op<R: Rng>(
    rng: &mut R,
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> f64 {
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.shape(out).to_vec()
    };
    let weights = randn(rng, &out_shape);
    let eval = |inputs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars);
        let l = project(&mut g, out, &weights);
        g.value(l).data()[0]
    };
    let analytic: Vec<Tensor<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars);
        let l = project(&mut g, out, &weights);
        let grads = g.backward(l).unwrap();
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| grads.wrt(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic[i].data()[j], numeric));
        }
    }
    worst
}

/// Central differences of `loss` with respect to up to `per_param` random
/// entries of every trainable parameter, against `analytic(name) -> grad`.
pub fn check_params<R: Rng>(
    rng: &mut R,
    store: &ParamStore<f64>,
    per_param: usize,
    analytic: impl Fn(&str) -> Option<Vec<f64>>,
    loss: impl Fn(&ParamStore<f64>) -> f64,
) -> (f64, usize) {
    let mut work = store.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.name.clone(), p.value.numel()))
        .collect();
    for (id, name, n) in ids {
        let grad = analytic(&name).unwrap_or_else(|| vec![0.0; n]);
        for _ in 0..per_param.min(n) {
            let j = rng.gen_range(0..n);
            let orig = work.get_mut(id).value.data()[j];
            work.get_mut(id).value.data_mut()[j] = orig + FD_STEP;
            let plus = loss(&work);
            work.get_mut(id).value.data_mut()[j] = orig - FD_STEP;
            let minus = loss(&work);
            work.get_mut(id).value.data_mut()[j] = orig;
            worst = worst.max(rel_error(grad[j], (plus - minus) / (2.0 * FD_STEP)));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Per-output-pixel bilinear sampling written from the definition: output
/// pixel `(r, c)` of a `P×P` patch looks at source point
/// `center + (index + 0.5 - P/2) · C/P` (pixel centers at `i + 0.5`), and
/// interpolates the four neighbouring pixels, reading zero outside.
pub fn brute_patch(image: &Image, center: GazeCenter, z: f64, p: usize) -> Vec<f32> {
    let (h, w) = (image.height(), image.width());
    let side = h.min(w) as f64 / 2f64.powf(z);
    let step = side / p as f64;
    let pixel = |y: i64, x: i64, ch: usize| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            image.get(y as usize, x as usize, ch) as f64
        }
    };
    let mut out = Vec::with_capacity(p * p * 3);
    for r in 0..p {
        for c in 0..p {
            let sy = center.y() * h as f64 + (r as f64 + 0.5 - p as f64 / 2.0) * step - 0.5;
            let sx = center.x() * w as f64 + (c as f64 + 0.5 - p as f64 / 2.0) * step - 0.5;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as i64, x0 as i64);
            for ch in 0..3 {
                let v = (1.0 - fy) * ((1.0 - fx) * pixel(y0, x0, ch) + fx * pixel(y0, x0 + 1, ch))
                    + fy * ((1.0 - fx) * pixel(y0 + 1, x0, ch) + fx * pixel(y0 + 1, x0 + 1, ch));
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

pub fn random_image<R: Rng>(rng: &mut R, h: usize, w: usize) -> Image {
    Image::new(h, w, (0..h * w * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
}
