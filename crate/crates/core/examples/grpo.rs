//! Advantages and the clipped objective on a hand-made group of four
//! rollouts, and the gradient it sends to the new log-probabilities.

use foveate::grpo::{group_normalize, grpo_objective, improvement_ratio};
use foveate::model::Session;
use foveate::tensor::{ParamStore, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Cross-entropy of the task head after each of two gaze steps, starting
    // from 2.3 (uniform over ten classes).
    let losses = [[1.4, 0.9], [2.0, 2.1], [1.1, 0.3], [2.2, 1.5]];
    let raw: Vec<Vec<f64>> = losses
        .iter()
        .map(|l| {
            let mut before = 2.3;
            l.iter()
                .map(|&after| {
                    let r = improvement_ratio(before, after);
                    before = after;
                    r
                })
                .collect()
        })
        .collect();
    let adv = group_normalize(&raw)?;
    for (r, a) in raw.iter().zip(&adv) {
        println!(
            "improvement {:>6.3} {:>6.3}   advantage {:>6.3} {:>6.3}",
            r[0], r[1], a[0], a[1]
        );
    }

    // The updated policy moved each action's log-density a little.
    let shift = [0.3, -0.1, 0.05, 0.4, -0.3, 0.0, 0.1, -0.2];
    let store = ParamStore::<f64>::new();
    let mut s = Session::new(&store);
    let new = s.graph.variable(Tensor::new(&[4, 2], shift.to_vec())?);
    let old = Tensor::zeros(&[4, 2]);
    let adv = Tensor::new(&[4, 2], adv.concat())?;
    let (loss, stats) = grpo_objective(&mut s, new, &old, &adv, 0.2)?;
    println!(
        "loss {:.4}, mean ratio {:.3}, clipped {:.0}%",
        stats.objective,
        stats.mean_ratio,
        stats.clip_fraction * 100.0
    );
    let grads = s.graph.backward(loss)?;
    let g = grads.wrt(new).expect("log-probs receive a gradient");
    println!(
        "d loss / d log-prob: {:?}",
        g.data()
            .iter()
            .map(|v| (v * 1e3).round() / 1e3)
            .collect::<Vec<_>>()
    );
    Ok(())
}
