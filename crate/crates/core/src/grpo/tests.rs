use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::Split;
use crate::model::EncoderConfig;
use crate::policy::PolicyConfig;

fn trace_with_losses(losses: &[f64]) -> Trace {
    Trace {
        states: vec![],
        actions: vec![GazeCenter::new(0.5, 0.5); losses.len() - 1],
        old_log_probs: vec![0.0; losses.len() - 1],
        losses: losses.to_vec(),
        final_logits: vec![],
        correct: vec![false; losses.len() - 1],
    }
}

fn column_stats(table: &[Vec<f64>], t: usize) -> (f64, f64) {
    let g = table.len() as f64;
    let mean = table.iter().map(|r| r[t]).sum::<f64>() / g;
    let var = table.iter().map(|r| (r[t] - mean).powi(2)).sum::<f64>() / g;
    (mean, var.sqrt())
}

#[test]
fn terminal_advantage_examples() {
    let sure = trace_with_losses(&[2.0, 1.0, 0.0]);
    let e = trace_with_losses(&[2.0, 1.5, 1.0]);
    let a = advantage_terminal(&[sure, e]);
    assert_eq!(a[0], vec![0.0, 0.0]);
    assert_eq!(a[1], vec![-1.0, -1.0]);
}

#[test]
fn improvement_ratio_examples() {
    assert!((improvement_ratio(2.0, 1.0) - 1.0 / 3.0).abs() < 1e-15);
    assert!((improvement_ratio(1.0, 2.0) + 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(improvement_ratio(0.7, 0.7), 0.0);
    assert_eq!(improvement_ratio(0.0, 0.0), 0.0);
    let a = advantage_improvement(&[trace_with_losses(&[2.0, 1.0, 2.0])]);
    assert_eq!(a[0].len(), 2);
    assert!((a[0][0] - 1.0 / 3.0).abs() < 1e-15 && (a[0][1] + 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn normalisation_examples() {
    let z = group_normalize(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
    let want = 1.0 / (2.0f64 / 3.0).sqrt();
    assert!(
        (z[0][0] + want).abs() < 1e-12 && z[1][0].abs() < 1e-12 && (z[2][0] - want).abs() < 1e-12
    );
    assert!((want - 1.2247).abs() < 1e-4);
    let flat = group_normalize(&[vec![0.4, 1.0], vec![0.4, 2.0]]).unwrap();
    assert_eq!((flat[0][0], flat[1][0]), (0.0, 0.0));
    assert!(group_normalize(&[vec![1.0]]).is_err());
}

#[test]
fn hand_clipped_objective() {
    let store = ParamStore::<f64>::new();
    let mut s = Session::new(&store);
    let new = s
        .graph
        .variable(Tensor::new(&[2, 1], vec![1.5f64.ln(), 0.5f64.ln()]).unwrap());
    let old = Tensor::zeros(&[2, 1]);
    let adv = Tensor::new(&[2, 1], vec![1.0, -1.0]).unwrap();
    let (loss, stats) = grpo_objective(&mut s, new, &old, &adv, 0.2).unwrap();
    // min(1.5, 1.2) * 1 = 1.2 and min(0.5 * -1, 0.8 * -1) = -0.8
    assert!((s.value(loss).item() + 0.2).abs() < 1e-9);
    assert_eq!(stats.clip_fraction, 1.0);
    let g = s.graph.backward(loss).unwrap().wrt(new).unwrap();
    // the clipped branch is the minimum in both rows, so no gradient flows
    assert_eq!(g.data(), &[0.0, 0.0]);

    let mut s = Session::new(&store);
    let new = s
        .graph
        .variable(Tensor::new(&[2, 1], vec![1.1f64.ln(), 3.0f64.ln()]).unwrap());
    let (_, stats) = grpo_objective(&mut s, new, &old, &adv, 0.2).unwrap();
    assert_eq!(stats.clip_fraction, 0.5);
}

#[test]
fn unclipped_branch_carries_gradient() {
    let store = ParamStore::<f64>::new();
    let mut s = Session::new(&store);
    // r = 1.1 inside the band; r = 3 with negative advantage stays unclipped
    let new = s
        .graph
        .variable(Tensor::new(&[2, 1], vec![1.1f64.ln(), 3.0f64.ln()]).unwrap());
    let adv = Tensor::new(&[2, 1], vec![1.0, -1.0]).unwrap();
    let (loss, _) = grpo_objective(&mut s, new, &Tensor::zeros(&[2, 1]), &adv, 0.2).unwrap();
    assert!((s.value(loss).item() - (-(1.1 - 3.0) / 2.0)).abs() < 1e-12);
    let g = s.graph.backward(loss).unwrap().wrt(new).unwrap();
    assert!((g.data()[0] + 0.55).abs() < 1e-12);
    assert!((g.data()[1] - 1.5).abs() < 1e-12);
}

#[test]
fn unit_ratio_gives_negative_mean_advantage() {
    let store = ParamStore::<f64>::new();
    let raw: Vec<Vec<f64>> = vec![vec![0.3, 1.0], vec![-0.2, 4.0], vec![0.9, 2.5]];
    let adv = group_normalize(&raw).unwrap();
    let flat: Vec<f64> = adv.iter().flatten().copied().collect();
    let lp = Tensor::new(&[3, 2], vec![-1.0, 0.5, 2.0, -0.3, 0.1, 0.0]).unwrap();
    let mut s = Session::new(&store);
    let new = s.graph.variable(lp.clone());
    let (loss, stats) = grpo_objective(
        &mut s,
        new,
        &lp,
        &Tensor::new(&[3, 2], flat.clone()).unwrap(),
        0.2,
    )
    .unwrap();
    assert!(s.value(loss).item().abs() < 1e-9);
    assert_eq!(stats.mean_ratio, 1.0);

    let raw_adv = Tensor::new(&[1, 3], vec![0.5, -2.0, 1.0]).unwrap();
    let lp = Tensor::zeros(&[1, 3]);
    let mut s = Session::new(&store);
    let new = s.graph.variable(lp.clone());
    let (loss, _) = grpo_objective(&mut s, new, &lp, &raw_adv, 0.2).unwrap();
    assert!((s.value(loss).item() - 0.5 / 3.0).abs() < 1e-12);
}

#[test]
fn nan_ratio_names_its_position() {
    let store = ParamStore::<f64>::new();
    let mut s = Session::new(&store);
    let new = s
        .graph
        .variable(Tensor::new(&[2, 2], vec![0.0, 0.0, 0.0, f64::NAN]).unwrap());
    let err = grpo_objective(
        &mut s,
        new,
        &Tensor::zeros(&[2, 2]),
        &Tensor::zeros(&[2, 2]),
        0.2,
    )
    .unwrap_err();
    assert!(err.to_string().contains("trace 1, step 1"), "{err}");
}

proptest! {
    #[test]
    fn normalised_columns_are_standard(
        raw in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..20),
        shift in -10.0f64..10.0,
        scale in 0.1f64..10.0,
    ) {
        let z = group_normalize(&raw).unwrap();
        for t in 0..3 {
            let (_, raw_std) = column_stats(&raw, t);
            let (mean, std) = column_stats(&z, t);
            if raw_std < 1e-6 {
                continue;
            }
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((std - 1.0).abs() < 1e-6);
        }
        let moved: Vec<Vec<f64>> = raw
            .iter()
            .map(|r| r.iter().enumerate().map(|(t, v)| v * scale + shift * t as f64).collect())
            .collect();
        let z2 = group_normalize(&moved).unwrap();
        for (a, b) in z.iter().flatten().zip(z2.iter().flatten()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn improvement_stays_in_unit_interval(a in 0.0f64..20.0, b in 0.0f64..20.0) {
        let r = improvement_ratio(a, b);
        prop_assert!((-1.0..=1.0).contains(&r));
    }
}

fn tiny_setup(sigma: f64, components: usize) -> (Encoder, Policy, ParamStore<f32>) {
    let cfg = EncoderConfig {
        layers: 1,
        dim: 8,
        heads: 2,
        state_size: 2,
        patch_size: 4,
        patch_count: 2,
        classes: 3,
        mlp_ratio: 1,
        pos_hidden: 4,
        head_hidden: 4,
        max_zoom: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let enc = Encoder::new(cfg, &mut store, &mut rng).unwrap();
    let pcfg = PolicyConfig {
        components,
        sigma,
        heads: 2,
        mlp_ratio: 1,
    };
    let pol = Policy::new(pcfg, 8, &mut store, &mut rng).unwrap();
    (enc, pol, store)
}

fn tiny_images(count: usize) -> LabeledDataset {
    let images = (0..count)
        .map(|i| {
            let mut img = Image::zeros(12, 12);
            for y in 0..12 {
                img.set(y, (i * 5) % 12, 0, 1.0);
            }
            img
        })
        .collect();
    LabeledDataset::new(images, (0..count).map(|i| i % 3).collect(), 3, Split::Train).unwrap()
}

#[test]
fn rollouts_are_reproducible() {
    let (enc, pol, store) = tiny_setup(0.1, 4);
    let ds = tiny_images(1);
    let a = rollout_group(&enc, &pol, &store, &ds.images[0], 1, 3, 4, 9).unwrap();
    let b = rollout_group(&enc, &pol, &store, &ds.images[0], 1, 3, 4, 9).unwrap();
    assert_eq!(a, b);
    assert_ne!(a[0].actions, a[1].actions);
    for tr in &a {
        assert_eq!(
            (tr.states.len(), tr.actions.len(), tr.losses.len()),
            (4, 3, 4)
        );
        assert!(tr.losses.iter().all(|&l| l >= 0.0));
    }
    let c = rollout_group(&enc, &pol, &store, &ds.images[0], 1, 3, 4, 10).unwrap();
    assert_ne!(a, c);
}

#[test]
fn vanishing_sigma_makes_traces_identical() {
    let (enc, pol, store) = tiny_setup(1e-9, 1);
    let ds = tiny_images(1);
    let traces = rollout_group(&enc, &pol, &store, &ds.images[0], 0, 3, 5, 3).unwrap();
    for tr in &traces[1..] {
        for (a, b) in tr.actions.iter().zip(&traces[0].actions) {
            assert!((a.x() - b.x()).abs() < 1e-6 && (a.y() - b.y()).abs() < 1e-6);
        }
        for (a, b) in tr.losses.iter().zip(&traces[0].losses) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}

#[test]
fn training_touches_only_the_policy() {
    let (enc, pol, mut store) = tiny_setup(0.1, 2);
    let before = store.clone();
    let ds = tiny_images(4);
    let cfg = GrpoConfig {
        group_size: 3,
        episode_len: 2,
        inner_epochs: 2,
        batch_size: 2,
        lr: 1e-2,
        ..GrpoConfig::default()
    };
    let zero = GrpoConfig {
        max_outer_steps: Some(0),
        ..cfg.clone()
    };
    assert_eq!(
        grpo_train(&enc, &pol, &mut store, &ds, &zero, |_| {}).unwrap(),
        0
    );
    for ((_, a), (_, b)) in store.iter().zip(before.iter()) {
        assert_eq!(a.value, b.value);
    }
    let mut records = Vec::new();
    let steps = grpo_train(&enc, &pol, &mut store, &ds, &cfg, |r| {
        records.push(r.clone())
    })
    .unwrap();
    assert_eq!(steps, 2);
    assert_eq!(records.len(), 4);
    assert_eq!(records[0].per_step_accuracy.len(), 2);
    let mut policy_changed = false;
    for ((_, a), (_, b)) in store.iter().zip(before.iter()) {
        if a.name.starts_with("policy.") {
            policy_changed |= a.value != b.value;
        } else {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
        assert_eq!(a.trainable, b.trainable);
    }
    assert!(policy_changed);
    // the first inner epoch reuses the sampling policy, so ratios start at one
    assert!((records[0].mean_ratio - 1.0).abs() < 1e-4);
}
