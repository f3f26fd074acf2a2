use mixmask::trainer::{self, RunOptions, TrainConfig};

#[test]
fn mixmask_training_loss_drops_on_separable_data() {
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 16,
        queue_k: 16,
        grid_n: 2,
        crop_scale_min: 0.8,
        jitter: 0.1,
        widths: vec![8, 16, 32],
        groups: 2,
        hidden_dim: 32,
        embed_dim: 16,
        dataset: "synthetic:kind=shapes,classes=2,per_class=256,size=16,seed=0".parse().unwrap(),
        deterministic: true,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let s = trainer::run_with(&cfg, dir.path(), &RunOptions::default()).unwrap();
    let first = s.epoch_losses.first().unwrap().1;
    let last = s.epoch_losses.last().unwrap().1;
    assert!(last <= 0.7 * first, "loss {first} -> {last}");
}
