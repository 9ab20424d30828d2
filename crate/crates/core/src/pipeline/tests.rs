use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::EncoderConfig;

fn tiny() -> RunConfig {
    RunConfig {
        epochs: 1,
        batch_size: 8,
        episode_len: 3,
        eval_batch: 16,
        dataset: DatasetConfig {
            train_size: 24,
            val_size: 16,
            canvas: 32,
            distractors: 2,
            grid_size: 16,
            ..Default::default()
        },
        model: EncoderConfig {
            layers: 1,
            dim: 16,
            heads: 2,
            state_size: 2,
            patch_size: 4,
            patch_count: 2,
            pos_hidden: 8,
            head_hidden: 16,
            max_zoom: 2.0,
            ..Default::default()
        },
        stage2: Stage2Config {
            group_size: 2,
            batch_size: 4,
            epochs: 1,
            max_outer_steps: Some(2),
            ..Default::default()
        },
        ..Default::default()
    }
}

fn same_params(a: &ParamStore<f32>, b: &ParamStore<f32>, prefix: &str) -> bool {
    a.iter()
        .zip(b.iter())
        .filter(|((_, p), _)| p.name.starts_with(prefix))
        .all(|((_, p), (_, q))| p.value == q.value)
}

#[test]
fn zero_epochs_returns_initial_parameters() {
    let config = RunConfig {
        epochs: 0,
        ..tiny()
    };
    let data = build_datasets(&config.dataset, config.seed).unwrap();
    let mut run = Run::new(config.clone(), "test").unwrap();
    let out = pretrain_stage1(&mut run, &data).unwrap();
    assert!(out.history.is_empty());
    assert!(same_params(
        &out.model.store,
        &init_model(&config).unwrap().store,
        ""
    ));
    assert_eq!(out.val.top1.len(), config.episode_len);
}

#[test]
fn stage2_with_zero_outer_steps_keeps_the_policy() {
    let mut config = tiny();
    config.stage2.max_outer_steps = Some(0);
    let data = build_datasets(&config.dataset, config.seed).unwrap();
    let model = init_model(&config).unwrap();
    let mut run = Run::new(config, "test").unwrap();
    let out = train_stage2(&mut run, &data, model.clone()).unwrap();
    assert_eq!(out.outer_steps, 0);
    assert!(same_params(&out.model.store, &model.store, ""));
}

#[test]
fn stage2_leaves_encoder_untouched() {
    let config = tiny();
    let data = build_datasets(&config.dataset, config.seed).unwrap();
    let model = init_model(&config).unwrap();
    let mut run = Run::new(config, "test").unwrap();
    let out = train_stage2(&mut run, &data, model.clone()).unwrap();
    assert!(out.outer_steps > 0);
    assert!(same_params(&out.model.store, &model.store, "encoder."));
    assert!(same_params(&out.model.store, &model.store, "head."));
    assert!(!same_params(&out.model.store, &model.store, "policy."));
    let rows: Vec<&str> = out.summary.rows.iter().map(|r| r.row.as_str()).collect();
    assert!(rows.contains(&"Pretrain Rand Policy - Step 1"));
    assert!(rows.contains(&"With Policy - Step 3"));
}

#[test]
fn evaluation_is_deterministic_and_top5_dominates() {
    let config = tiny();
    let data = build_datasets(&config.dataset, config.seed).unwrap();
    let model = init_model(&config).unwrap();
    for mode in [
        PolicyMode::Random,
        PolicyMode::Learned,
        PolicyMode::Fixed(vec![crate::patchify::GazeCenter::new(0.5, 0.5)]),
    ] {
        let a = evaluate(&model, &data.val, &mode, 3, 7, 5).unwrap();
        let b = evaluate(&model, &data.val, &mode, 3, 7, 16).unwrap();
        assert_eq!(a, b, "{mode:?}");
        for (t1, t5) in a.top1.iter().zip(&a.top5) {
            assert!(t1 <= t5 && (0.0..=1.0).contains(t5));
        }
    }
    assert!(evaluate(&model, &data.val, &PolicyMode::Fixed(vec![]), 3, 7, 5).is_err());
}

#[test]
fn untrained_model_is_near_chance() {
    let mut config = tiny();
    config.dataset.val_size = 400;
    let data = build_datasets(&config.dataset, config.seed).unwrap();
    let model = init_model(&config).unwrap();
    let acc = evaluate(&model, &data.val, &PolicyMode::Random, 2, 0, 100).unwrap();
    for t in acc.top1 {
        assert!(t < 0.3, "{t}");
    }
}

#[test]
fn identical_runs_write_identical_metrics() {
    let d = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for _ in 0..2 {
        let config = RunConfig {
            output_dir: Some(d.path().to_path_buf()),
            ..tiny()
        };
        let data = build_datasets(&config.dataset, config.seed).unwrap();
        let mut run = Run::new(config, "pretrain").unwrap();
        pretrain_stage1(&mut run, &data).unwrap();
        drop(run);
        files.push((
            std::fs::read(d.path().join("metrics.jsonl")).unwrap(),
            std::fs::read(d.path().join("stage1.fve")).unwrap(),
        ));
        assert!(d.path().join("config.toml").exists());
        assert!(d.path().join("summary.json").exists());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn metrics_header_echoes_the_config() {
    let config = RunConfig { seed: 11, ..tiny() };
    let run = Run::new(config.clone(), "pretrain").unwrap();
    let header: serde_json::Value = serde_json::from_str(&run.metrics.lines[0]).unwrap();
    assert_eq!(header["kind"], "header");
    assert_eq!(header["command"], "pretrain");
    let echoed: RunConfig = serde_json::from_value(header["config"].clone()).unwrap();
    assert_eq!(echoed, config);
}

#[test]
fn overfit_loss_decreases() {
    let config = RunConfig {
        base_lr: 3e-3,
        ..tiny()
    };
    let data = build_datasets(&config.dataset, config.seed).unwrap();
    let batch = data.train.subset(&[0, 1, 2, 3]);
    let losses = overfit_batch(&config, &batch, 80).unwrap();
    assert_eq!(losses.len(), 80);
    assert!(
        losses[79] < 0.3 * losses[0],
        "{} -> {}",
        losses[0],
        losses[79]
    );
}

#[test]
fn datasets_are_pure_in_the_seed() {
    let c = tiny().dataset;
    let (a, b) = (
        build_datasets(&c, 3).unwrap(),
        build_datasets(&c, 3).unwrap(),
    );
    assert_eq!(a.train.labels, b.train.labels);
    assert_eq!(a.val.images[0], b.val.images[0]);
    assert_ne!(
        build_datasets(&c, 4).unwrap().train.images[0],
        a.train.images[0]
    );
}

proptest! {
    #[test]
    fn shuffled_groups_partition_the_tiles(groups in 1usize..6, per in 1usize..8, seed: u64) {
        let tiles = groups * per;
        let g = shuffle_groups(tiles, groups, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(g.len(), groups);
        let mut all: Vec<usize> = g.iter().flatten().copied().collect();
        prop_assert!(g.iter().all(|x| x.len() == per));
        all.sort_unstable();
        prop_assert_eq!(all, (0..tiles).collect::<Vec<_>>());
    }
}
