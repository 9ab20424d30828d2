//! Finite-difference checks of every graph primitive and of one encoder step.

use foveate::model::{Encoder, EncoderConfig, Glimpses, Session};
use foveate::tensor::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_op, check_params, randn, uniform};

type Case = (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> f64>);

fn one(
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> f64 {
    check_op(rng, &inputs, f)
}

fn map(t: &Tensor<f64>, f: impl Fn(f64) -> f64) -> Tensor<f64> {
    Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).unwrap()
}

/// Every primitive as `(name, check)`; a check returns the worst relative error.
pub fn primitive_cases() -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, |$rng:ident| $body:expr) => {
            cases.push(($name, Box::new(move |$rng: &mut ChaCha8Rng| $body)));
        };
    }
    case!("add", |r| {
        let i = vec![randn(r, &[3, 4]), randn(r, &[4])];
        one(r, i, |g, v| g.add(v[0], v[1]).unwrap())
    });
    case!("sub", |r| {
        let i = vec![randn(r, &[2, 3, 4]), randn(r, &[2, 1, 4])];
        one(r, i, |g, v| g.sub(v[0], v[1]).unwrap())
    });
    case!("mul", |r| {
        let i = vec![randn(r, &[3, 4]), randn(r, &[3, 1])];
        one(r, i, |g, v| g.mul(v[0], v[1]).unwrap())
    });
    case!("minimum", |r| {
        let a = randn(r, &[12]);
        let b = map(&a, |x| if x > 0.0 { x - 0.5 } else { x + 0.5 });
        one(r, vec![a, b], |g, v| g.minimum(v[0], v[1]).unwrap())
    });
    case!("scale", |r| {
        let c = r.gen_range(-2.0..2.0);
        let i = vec![randn(r, &[5])];
        one(r, i, move |g, v| g.scale(v[0], c))
    });
    case!("neg", |r| {
        let i = vec![randn(r, &[5])];
        one(r, i, |g, v| g.neg(v[0]))
    });
    case!("add_scalar", |r| {
        let i = vec![randn(r, &[5])];
        one(r, i, |g, v| g.add_scalar(v[0], 0.7))
    });
    case!("exp", |r| {
        let i = vec![randn(r, &[6])];
        one(r, i, |g, v| g.exp(v[0]))
    });
    case!("log", |r| {
        let i = vec![uniform(r, &[6], 0.2, 3.0)];
        one(r, i, |g, v| g.log(v[0]))
    });
    case!("square", |r| {
        let i = vec![randn(r, &[6])];
        one(r, i, |g, v| g.square(v[0]))
    });
    case!("sigmoid", |r| {
        let i = vec![randn(r, &[6])];
        one(r, i, |g, v| g.sigmoid(v[0]))
    });
    case!("gelu", |r| {
        let i = vec![randn(r, &[8])];
        one(r, i, |g, v| g.gelu(v[0]))
    });
    case!("clamp", |r| {
        let x = map(&randn(r, &[10]), |x| {
            if (x.abs() - 0.5).abs() < 0.05 {
                x * 1.3
            } else {
                x
            }
        });
        one(r, vec![x], |g, v| g.clamp(v[0], -0.5, 0.5))
    });
    case!("matmul", |r| {
        let i = vec![randn(r, &[3, 4]), randn(r, &[4, 2])];
        one(r, i, |g, v| g.matmul(v[0], v[1]).unwrap())
    });
    case!("batched matmul", |r| {
        let i = vec![randn(r, &[2, 3, 4]), randn(r, &[2, 4, 5])];
        one(r, i, |g, v| g.matmul(v[0], v[1]).unwrap())
    });
    case!("broadcast matmul", |r| {
        let i = vec![randn(r, &[2, 3, 4]), randn(r, &[4, 2])];
        one(r, i, |g, v| g.matmul(v[0], v[1]).unwrap())
    });
    case!("permute", |r| {
        let i = vec![randn(r, &[2, 3, 4])];
        one(r, i, |g, v| g.permute(v[0], &[2, 0, 1]).unwrap())
    });
    case!("transpose", |r| {
        let i = vec![randn(r, &[3, 5])];
        one(r, i, |g, v| g.transpose(v[0]).unwrap())
    });
    case!("reshape", |r| {
        let i = vec![randn(r, &[2, 6])];
        one(r, i, |g, v| g.reshape(v[0], &[3, 4]).unwrap())
    });
    case!("concat", |r| {
        let i = vec![randn(r, &[2, 3]), randn(r, &[2, 2])];
        one(r, i, |g, v| g.concat(&[v[0], v[1]], 1).unwrap())
    });
    case!("slice", |r| {
        let i = vec![randn(r, &[2, 5, 3])];
        one(r, i, |g, v| g.slice(v[0], 1, 1, 4).unwrap())
    });
    case!("softmax", |r| {
        let i = vec![randn(r, &[3, 5])];
        one(r, i, |g, v| g.softmax(v[0], 1).unwrap())
    });
    case!("log_softmax", |r| {
        let i = vec![randn(r, &[3, 5])];
        one(r, i, |g, v| g.log_softmax(v[0], 0).unwrap())
    });
    case!("logsumexp", |r| {
        let i = vec![randn(r, &[3, 5])];
        one(r, i, |g, v| g.logsumexp(v[0], 1).unwrap())
    });
    case!("sum_axis", |r| {
        let i = vec![randn(r, &[3, 4, 2])];
        one(r, i, |g, v| g.sum_axis(v[0], 1).unwrap())
    });
    case!("sum", |r| {
        let i = vec![randn(r, &[7])];
        one(r, i, |g, v| g.sum(v[0]))
    });
    case!("mean", |r| {
        let i = vec![randn(r, &[7])];
        one(r, i, |g, v| g.mean(v[0]))
    });
    case!("layer_norm", |r| {
        let i = vec![randn(r, &[3, 6]), randn(r, &[6]), randn(r, &[6])];
        one(r, i, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap())
    });
    case!("cross_entropy", |r| {
        let mut t = uniform(r, &[3, 4], 0.0, 1.0);
        for row in t.data_mut().chunks_mut(4) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        let i = vec![randn(r, &[3, 4])];
        one(r, i, move |g, v| g.cross_entropy(v[0], &t).unwrap())
    });
    cases
}

fn encoder_config() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        dim: 8,
        heads: 2,
        state_size: 3,
        patch_size: 2,
        patch_count: 2,
        classes: 4,
        pos_hidden: 6,
        head_hidden: 8,
        ..EncoderConfig::default()
    }
}

/// Worst relative error of every encoder/head parameter for the loss of one
/// step from a random (non-prompt) state, plus the number of entries checked.
pub fn encoder_step_check(seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = encoder_config();
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::new(cfg.clone(), &mut store, &mut rng).unwrap();
    let (b, t) = (2, cfg.patch_count);
    let pixels: Vec<f32> = (0..b * t * cfg.patch_len()).map(|_| rng.gen()).collect();
    let coords: Vec<[f64; 3]> = (0..b * t)
        .map(|_| [rng.gen(), rng.gen(), rng.gen()])
        .collect();
    let glimpses = Glimpses::<f64>::from_parts(b, t, cfg.patch_len(), &pixels, &coords).unwrap();
    let state = randn(&mut rng, &[b, cfg.state_size, cfg.dim]);
    let mut y = Tensor::zeros(&[b, cfg.classes]);
    y.data_mut()[1] = 1.0;
    y.data_mut()[cfg.classes + 3] = 1.0;
    let forward = |s: &mut Session<'_, f64>| {
        let st = s.graph.variable(state.clone());
        let tok = enc.tokenize(s, &glimpses).unwrap();
        let next = enc.step(s, st, tok).unwrap();
        let logits = enc.task_head(s, next).unwrap();
        s.graph.cross_entropy(logits, &y).unwrap()
    };
    let grads = {
        let mut s = Session::new(&store);
        let l = forward(&mut s);
        s.backward(l).unwrap()
    };
    let by_name = |name: &str| {
        let id = store.id(name)?;
        grads.get(id).map(|g| g.to_vec())
    };
    check_params(&mut rng, &store, 6, by_name, |st| {
        let mut s = Session::new(st);
        let l = forward(&mut s);
        s.value(l).item()
    })
}
