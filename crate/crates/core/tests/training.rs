use roadmap::train::{generate_synthetic, load_checkpoint, save_checkpoint, train, SyntheticConfig, TrainConfig};
use roadmap::LossKind;

fn separable() -> roadmap::train::Dataset {
    generate_synthetic(&SyntheticConfig { classes: 8, per_class: 16, feature_dim: 32, noise_sigma: 0.1, seed: 7 }).unwrap()
}

/// Mean loss over each run of five consecutive epochs, starting at `from`.
fn window_means(losses: &[f64], from: usize) -> Vec<f64> {
    losses[from..].windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect()
}

#[test]
fn windowed_loss_does_not_increase_after_warmup() {
    let data = separable();
    for seed in 1..=5 {
        let cfg = TrainConfig { seed, probe_batches: 0, ..TrainConfig::new(LossKind::Roadmap, 50) };
        let losses = train(&data, None, &cfg).unwrap().history.losses();
        assert_eq!(losses.len(), 50);
        let means = window_means(&losses, 5);
        for (i, pair) in means.windows(2).enumerate() {
            assert!(pair[1] <= pair[0] + 1e-3, "seed {seed}: window at epoch {} rises {:.2e}", i + 6, pair[1] - pair[0]);
        }
        assert!(losses[49] < losses[0]);
    }
}

#[test]
fn trained_checkpoint_round_trips() {
    let data = separable();
    let cfg = TrainConfig { seed: 4, probe_batches: 0, ..TrainConfig::new(LossKind::SupAp, 3) };
    let out = train(&data, None, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    save_checkpoint(&out.params, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, out.params);
    assert_eq!(back.embed(&data.features).unwrap(), out.params.embed(&data.features).unwrap());
}

#[test]
fn every_loss_trains_deterministically() {
    let data = separable();
    for loss in LossKind::ALL {
        let cfg = TrainConfig { seed: 9, ..TrainConfig::new(loss, 4) };
        let a = train(&data, None, &cfg).unwrap();
        let b = train(&data, None, &cfg).unwrap();
        assert_eq!(a, b, "{loss}");
        assert!(a.history.epochs.iter().all(|e| e.mean_loss.is_finite() && e.skipped_batches == 0));
    }
}
