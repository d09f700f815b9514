use cfss_core::data::{synth_dataset, CrackDataset, LowLightParams, Split};
use cfss_core::engine::{evaluate, load_checkpoint, save_checkpoint, TrainConfig, Trainer};
use cfss_core::Error;

fn dataset(count: usize, seed: u64) -> CrackDataset {
    let samples = synth_dataset(count, (64, 64), seed, Some(LowLightParams::default())).unwrap();
    CrackDataset::from_samples(samples.into_iter().map(|(_, s)| s).collect(), Split::Train).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        iterations: 3,
        batch_episodes: 2,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_losses_and_weights() {
    let ds = dataset(6, 1);
    let run = || {
        let mut t = Trainer::new(small_config()).unwrap();
        let log = t.train(&ds, |_| {}).unwrap();
        (
            log,
            t.network.store.iter().map(|(_, _, v)| v.clone()).collect::<Vec<_>>(),
        )
    };
    let (a, wa) = run();
    let (b, wb) = run();
    assert_eq!(a, b);
    assert_eq!(wa, wb);
    assert_eq!(a.len(), 3);
}

#[test]
fn zero_learning_rate_leaves_weights_bitwise() {
    let ds = dataset(6, 2);
    let mut t = Trainer::new(small_config()).unwrap();
    let before: Vec<_> = t.network.store.iter().map(|(_, _, v)| v.clone()).collect();
    let batch = t.draw_batch(&ds, 0).unwrap();
    t.train_step_with_lr(&batch, 0.0).unwrap();
    let after: Vec<_> = t.network.store.iter().map(|(_, _, v)| v.clone()).collect();
    assert_eq!(before, after);
}

#[test]
fn evaluation_is_pure_and_repeatable() {
    let ds = dataset(6, 3);
    let cfg = small_config();
    let t = Trainer::new(cfg.clone()).unwrap();
    let before: Vec<_> = t.network.store.iter().map(|(_, _, v)| v.clone()).collect();
    let a = evaluate(&t.network, &cfg, &ds, 1, 4, 9).unwrap();
    let b = evaluate(&t.network, &cfg, &ds, 1, 4, 9).unwrap();
    let after: Vec<_> = t.network.store.iter().map(|(_, _, v)| v.clone()).collect();
    assert_eq!(a, b);
    assert_eq!(before, after);
    assert!((0.0..=1.0).contains(&a.miou));
    assert_eq!(a.per_episode_iou.len() + a.skipped, 4);
    assert_eq!(a.config_digest, cfg.digest());
}

#[test]
fn evaluation_rejects_zero_episodes() {
    let ds = dataset(4, 4);
    let cfg = small_config();
    let t = Trainer::new(cfg.clone()).unwrap();
    assert!(evaluate(&t.network, &cfg, &ds, 1, 0, 0).is_err());
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let ds = dataset(6, 5);
    let mut t = Trainer::new(small_config()).unwrap();
    t.train(&ds, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&t.network.store, &t.config, &path).unwrap();
    let (net, cfg) = load_checkpoint(&path).unwrap();
    assert_eq!(cfg, t.config);
    let a = evaluate(&t.network, &cfg, &ds, 1, 3, 2).unwrap();
    let b = evaluate(&net, &cfg, &ds, 1, 3, 2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let t = Trainer::new(small_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&t.network.store, &t.config, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn nan_weights_are_reported_by_name() {
    let ds = dataset(6, 6);
    let mut t = Trainer::new(small_config()).unwrap();
    let id = t.network.store.ids().next().unwrap();
    t.network.store.get_mut(id).data_mut()[0] = f32::NAN;
    let batch = t.draw_batch(&ds, 0).unwrap();
    match t.train_step(&batch) {
        Err(Error::NonFinite(what)) => assert!(!what.is_empty()),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}
