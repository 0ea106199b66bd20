mod common;

use common::{dataset, in_pool, quick_train, small_data, tiny_model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use simprop::data::{sample_episode, Split};
use simprop::model::checkpoint::Checkpoint;
use simprop::train::{
    batch_gradient, episode_gradient, initial_model, mean_loss, train, EpisodeInput, TrainConfig, BEST_CHECKPOINT,
    LAST_CHECKPOINT, METRICS_FILE, METRICS_HEADER,
};
use simprop::Error;

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let (_dir, ds) = dataset(1);
    let cfg = TrainConfig {
        lr: 0.0,
        ..quick_train()
    };
    let state = train(&cfg, &tiny_model(), &ds, &small_data().train_classes(), None).unwrap();
    let init = initial_model(&cfg, &tiny_model()).unwrap();
    for (a, b) in state.params.leaves().iter().zip(init.params.leaves()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn batch_gradient_is_mean_of_episode_gradients() {
    let (_dir, ds) = dataset(2);
    let cfg = tiny_model();
    let net = initial_model(&TrainConfig::default(), &cfg).unwrap();
    let pool = ds.pool(&small_data().train_classes(), Split::Train).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs: Vec<EpisodeInput> = (0..2)
        .map(|_| EpisodeInput::new(&ds, &cfg, &sample_episode(&pool, 1, &mut rng).unwrap()))
        .collect();
    for dpr in [true, false] {
        let (loss, batch) = batch_gradient(&net.params, &cfg, &inputs, dpr).unwrap();
        let (l0, g0) = episode_gradient(&net.params, &cfg, &inputs[0], dpr).unwrap();
        let (l1, g1) = episode_gradient(&net.params, &cfg, &inputs[1], dpr).unwrap();
        assert!((loss - (l0 + l1) / 2.0).abs() < 1e-12);
        for ((b, x), y) in batch.leaves().iter().zip(g0.leaves()).zip(g1.leaves()) {
            for ((&b, &x), &y) in b.data().iter().zip(x.data()).zip(y.data()) {
                let mean = (x as f64 + y as f64) / 2.0;
                assert!((b as f64 - mean).abs() <= 1e-5 * mean.abs().max(1.0), "{b} vs {mean}");
            }
        }
    }
}

#[test]
fn smoke_run_reduces_loss_on_a_fixed_batch() {
    let (_dir, ds) = dataset(4);
    let cfg = quick_train();
    let classes = small_data().train_classes();
    let pool = ds.pool(&classes, Split::Train).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let probe: Vec<_> = (0..8).map(|_| sample_episode(&pool, 1, &mut rng).unwrap()).collect();

    let init = initial_model(&cfg, &tiny_model()).unwrap();
    let state = train(&cfg, &tiny_model(), &ds, &classes, None).unwrap();
    assert_eq!(state.metrics.len(), 2);
    let before = mean_loss(&init.params, &init.config, &ds, &probe, true).unwrap();
    let after = mean_loss(&state.params, &state.config, &ds, &probe, true).unwrap();
    assert!(after < before, "loss went from {before} to {after}");
}

#[test]
fn outputs_are_deterministic_across_runs_and_threads() {
    let (_dir, ds) = dataset(5);
    let cfg = TrainConfig {
        epochs: 3,
        ..quick_train()
    };
    let classes = small_data().train_classes();
    let run = |threads: usize| {
        let out = tempfile::tempdir().unwrap();
        in_pool(threads, || {
            train(&cfg, &tiny_model(), &ds, &classes, Some(out.path())).unwrap()
        });
        [METRICS_FILE, BEST_CHECKPOINT, LAST_CHECKPOINT].map(|f| std::fs::read(out.path().join(f)).unwrap())
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_eq!(a, run(3));
}

#[test]
fn best_checkpoint_tracks_the_validation_maximum() {
    let (_dir, ds) = dataset(6);
    let cfg = TrainConfig {
        epochs: 4,
        lr: 0.05,
        ..quick_train()
    };
    let out = tempfile::tempdir().unwrap();
    let state = train(
        &cfg,
        &tiny_model(),
        &ds,
        &small_data().train_classes(),
        Some(out.path()),
    )
    .unwrap();

    let csv = std::fs::read_to_string(out.path().join(METRICS_FILE)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    let vals: Vec<f64> = lines.map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(vals.len(), 4);
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let best = Checkpoint::load(&out.path().join(BEST_CHECKPOINT), Some(&state.config)).unwrap();
    let recorded: f64 = best.meta("val_miou").unwrap().parse().unwrap();
    assert_eq!(recorded, max);
    assert_eq!(format!("{:.6}", state.best_val_miou), format!("{max:.6}"));
    for (a, b) in best.params.leaves().iter().zip(state.best_params.leaves()) {
        assert_eq!(a.data(), b.data());
    }
    let last = Checkpoint::load(&out.path().join(LAST_CHECKPOINT), Some(&state.config)).unwrap();
    assert_eq!(last.meta("epoch"), Some("3"));
}

#[test]
fn diverging_run_aborts_with_a_numeric_error() {
    let (_dir, ds) = dataset(7);
    let cfg = TrainConfig {
        lr: 1e30,
        epochs: 3,
        ..quick_train()
    };
    let err = train(&cfg, &tiny_model(), &ds, &small_data().train_classes(), None).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    assert!(err.is_numeric());
}

#[test]
fn fusion_switch_follows_the_training_flag() {
    let (_dir, ds) = dataset(8);
    let cfg = TrainConfig {
        use_fbaf: false,
        epochs: 1,
        ..quick_train()
    };
    let state = train(&cfg, &tiny_model(), &ds, &small_data().train_classes(), None).unwrap();
    assert!(!state.config.fbaf);
    let wide = tiny_model().fusion_channels;
    assert_eq!(state.params.fusion[1].weight.shape()[1], wide);
}

#[test]
fn mismatched_input_size_is_rejected() {
    let (_dir, ds) = dataset(9);
    let model = simprop::model::ModelConfig {
        input_size: 64,
        ..tiny_model()
    };
    let err = train(&quick_train(), &model, &ds, &small_data().train_classes(), None).unwrap_err();
    assert!(!err.is_numeric());
}
