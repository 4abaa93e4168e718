mod common;

use krlm_core::trainer::{read_metrics, windowed_means, TrainConfig, Trainer};
use krlm_core::KrlmError;

fn toy_config(steps: u64) -> TrainConfig {
    TrainConfig {
        max_steps: Some(steps),
        negatives: 16,
        lr: 2e-3,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn zero_steps_leave_parameters_untouched() {
    let split = common::toy_split(1, 12);
    let (model, mut store) = common::tiny_model(&split.ctx.kg, 2, 8, 3);
    let (all, frozen) = (store.checksum(), store.frozen_checksum());
    let out = Trainer::new(&model, &split, toy_config(0)).run(&mut store, None).unwrap();
    assert_eq!(out.steps, 0);
    assert!(out.log.is_empty());
    assert_eq!(store.checksum(), all);
    assert_eq!(out.last.frozen_checksum(), frozen);
}

#[test]
fn toy_graph_loss_decreases_and_backbone_stays_frozen() {
    let split = common::toy_split(2, 12);
    assert_eq!(split.ctx.kg.triplets().len(), 60);
    let (model, mut store) = common::tiny_model(&split.ctx.kg, 2, 8, 3);
    let frozen = store.frozen_checksum();
    let before = store.checksum();
    let dir = tempfile::tempdir().unwrap();
    let out = Trainer::new(&model, &split, toy_config(200))
        .with_out_dir(dir.path())
        .run(&mut store, None)
        .unwrap();
    let w = windowed_means(&out.log, 20);
    assert_eq!(w.len(), 10);
    for pair in w[..5].windows(2) {
        assert!(pair[1] < pair[0], "windows {w:?}");
    }
    assert_eq!(store.frozen_checksum(), frozen);
    assert_ne!(store.checksum(), before);

    let logged = read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(logged, out.log);
    assert_eq!(logged[0].step, 0);
    assert!(logged.iter().all(|r| r.lr > 0.0));
    assert!(!out.validations.is_empty());
    let best = out.best.as_ref().unwrap();
    assert!(out.validations.iter().all(|v| v.mrr <= best.0.mrr));
}

#[test]
fn same_seed_same_run() {
    let split = common::toy_split(3, 10);
    let run = || {
        let (model, mut store) = common::tiny_model(&split.ctx.kg, 1, 8, 2);
        let out = Trainer::new(&model, &split, toy_config(12)).run(&mut store, None).unwrap();
        (out.log, store.checksum())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);

    let (model, mut store) = common::tiny_model(&split.ctx.kg, 1, 8, 2);
    let mut cfg = toy_config(12);
    cfg.seed = 4;
    let other = Trainer::new(&model, &split, cfg).run(&mut store, None).unwrap();
    assert_ne!(other.log, a);
}

#[test]
fn parallel_batch_matches_sequential() {
    let split = common::toy_split(5, 10);
    let run = |jobs| {
        let (model, mut store) = common::tiny_model(&split.ctx.kg, 1, 8, 2);
        let mut cfg = toy_config(8);
        cfg.jobs = jobs;
        Trainer::new(&model, &split, cfg).run(&mut store, None).unwrap();
        store.checksum()
    };
    assert_eq!(run(1), run(2));
}

#[test]
fn non_finite_loss_aborts_with_snapshot() {
    let split = common::toy_split(6, 10);
    let (model, mut store) = common::tiny_model(&split.ctx.kg, 1, 8, 2);
    let id = store.id("predictor.scorer.g.weight").unwrap();
    store.get_mut(id).tensor.data_mut()[0] = f64::NAN;
    let dir = tempfile::tempdir().unwrap();
    let err = Trainer::new(&model, &split, toy_config(5))
        .with_out_dir(dir.path())
        .run(&mut store, None)
        .unwrap_err();
    assert!(matches!(err, KrlmError::NonFiniteLoss { step: 0 }));
    // non-finite losses are written as null
    let snap: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("nan_snapshot.json")).unwrap()).unwrap();
    assert_eq!(snap["step"], 0);
    assert_eq!(snap["queries"].as_array().unwrap().len(), 4);
    assert!(snap["losses"][0]["total"].is_null());
}

#[test]
fn rejects_invalid_settings() {
    let split = common::toy_split(7, 10);
    let (model, mut store) = common::tiny_model(&split.ctx.kg, 1, 8, 2);
    for cfg in [
        TrainConfig { lambda: 1.5, ..toy_config(1) },
        TrainConfig { batch_size: 0, ..toy_config(1) },
        TrainConfig { lr: 0.0, ..toy_config(1) },
    ] {
        assert!(matches!(
            Trainer::new(&model, &split, cfg).run(&mut store, None),
            Err(KrlmError::Config(_))
        ));
    }
}
