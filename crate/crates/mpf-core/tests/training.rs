//! End-to-end training behavior: determinism, persistence, resume equality,
//! and basic optimization sanity.

mod common;

use mpf_core::arch::ArchitectureSpec;
use mpf_core::checkpoint::Checkpoint;
use mpf_core::dataset::Dataset;
use mpf_core::synth::{generate_samples, SyntheticTaskConfig};
use mpf_core::tensor::Precision;
use mpf_core::trainer::{evaluate, resume, train, LossDivisor, TrainConfig, Trainer};

const TINY_ARCH: &str = "\
classes = 8
steps = 2
lambda = 0.3,1.0
recurrent = 3
conv out=4 k=3 s=1 p=1
relu
conv out=6 k=3 s=1 p=1
relu
";

fn tiny_dataset(count: usize, base_seed: u64) -> Dataset {
    let config = SyntheticTaskConfig { image_size: 16, border: 2, ..Default::default() };
    let samples = generate_samples(&config, count, base_seed).unwrap();
    Dataset::from_samples(samples, config.num_classes()).unwrap()
}

fn quick_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        batch_size: 4,
        learning_rate: 1e-4,
        weight_decay: 0.0,
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_at_init() {
    let arch = ArchitectureSpec::parse(TINY_ARCH).unwrap();
    let data = tiny_dataset(6, 0);
    let mut config = quick_config(2, 1);
    config.learning_rate = 0.0;
    let outcome = train(&arch, &data, None, &config).unwrap();

    // Initialization alone: same seed, zero epochs.
    let mut config0 = config.clone();
    config0.epochs = 0;
    let init = train(&arch, &data, None, &config0).unwrap();
    for ((name_a, a), (name_b, b)) in outcome.checkpoint.params.iter().zip(&init.checkpoint.params) {
        assert_eq!(name_a, name_b);
        assert_eq!(a.data(), b.data(), "lr=0 changed parameter {name_a}");
    }
}

#[test]
fn loss_decreases_over_first_five_steps_on_one_sample() {
    let arch = ArchitectureSpec::parse(TINY_ARCH).unwrap();
    let data = tiny_dataset(1, 3);
    let config = TrainConfig {
        epochs: 5,
        seed: 5,
        batch_size: 1,
        learning_rate: 2e-5,
        momentum: 0.0,
        weight_decay: 0.0,
        hflip_probability: 0.0,
        precision: Precision::Double,
        ..Default::default()
    };
    let outcome = train(&arch, &data, None, &config).unwrap();
    let losses: Vec<f64> = outcome.log.iter().map(|e| e.loss).collect();
    assert_eq!(losses.len(), 5);
    for i in 1..losses.len() {
        assert!(
            losses[i] < losses[i - 1],
            "loss must decrease on a memorized sample: {losses:?}"
        );
    }
}

#[test]
fn same_seed_gives_bit_identical_checkpoints() {
    let arch = ArchitectureSpec::parse(TINY_ARCH).unwrap();
    let data = tiny_dataset(8, 7);
    let config = quick_config(2, 9);
    let a = train(&arch, &data, None, &config).unwrap();
    let b = train(&arch, &data, None, &config).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());

    let mut other_seed = config;
    other_seed.seed = 10;
    let c = train(&arch, &data, None, &other_seed).unwrap();
    assert_ne!(a.checkpoint.to_bytes(), c.checkpoint.to_bytes());
}

#[test]
fn parallel_and_serial_batches_agree_exactly() {
    let arch = ArchitectureSpec::parse(TINY_ARCH).unwrap();
    let data = tiny_dataset(8, 11);
    let mut config = quick_config(2, 13);
    config.parallel = true;
    let a = train(&arch, &data, None, &config).unwrap();
    config.parallel = false;
    let b = train(&arch, &data, None, &config).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
}

#[test]
fn save_load_save_is_bit_exact() {
    let arch = ArchitectureSpec::parse(TINY_ARCH).unwrap();
    let data = tiny_dataset(4, 15);
    let outcome = train(&arch, &data, None, &quick_config(1, 17)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mpfn");
    outcome.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let path2 = dir.path().join("model2.mpfn");
    loaded.save(&path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let arch = ArchitectureSpec::parse(TINY_ARCH).unwrap();
    let data = tiny_dataset(8, 19);
    let full = train(&arch, &data, None, &quick_config(4, 21)).unwrap();

    let half = train(&arch, &data, None, &quick_config(2, 21)).unwrap();
    let resumed = resume(&half.checkpoint, &data, None, &quick_config(4, 21)).unwrap();

    assert_eq!(full.checkpoint.to_bytes(), resumed.checkpoint.to_bytes());
    // The per-epoch logs line up on the shared epochs too.
    assert_eq!(resumed.log.len(), 2);
    assert_eq!(full.log[2..], resumed.log[..]);
}

#[test]
fn validation_metrics_are_logged() {
    let arch = ArchitectureSpec::parse(TINY_ARCH).unwrap();
    let data = tiny_dataset(6, 23);
    let val = tiny_dataset(3, 404);
    let outcome = train(&arch, &data, Some(&val), &quick_config(1, 25)).unwrap();
    let entry = &outcome.log[0];
    assert!(entry.val_pa.is_some() && entry.val_ca.is_some());
    let pa = entry.val_pa.unwrap();
    assert!((0.0..=1.0).contains(&pa));
    let line = entry.csv_line();
    assert_eq!(line.split(',').count(), 4);
}

#[test]
fn overfit_one_sample_reaches_high_training_accuracy() {
    // Memorize a single scene, then evaluate on it.
    let arch = ArchitectureSpec::parse(TINY_ARCH).unwrap();
    let data = tiny_dataset(1, 27);
    let config = TrainConfig {
        epochs: 150,
        seed: 29,
        batch_size: 1,
        learning_rate: 1e-4,
        momentum: 0.9,
        weight_decay: 0.0,
        hflip_probability: 0.0,
        ..Default::default()
    };
    let outcome = train(&arch, &data, None, &config).unwrap();
    let trainer = Trainer::from_checkpoint(&outcome.checkpoint, &data, &config).unwrap();
    let cm = evaluate(trainer.model(), &data).unwrap();
    assert!(
        cm.pixel_accuracy() > 0.9,
        "memorized sample should score near-perfect PA, got {}",
        cm.pixel_accuracy()
    );
}

#[test]
fn divergence_is_reported_as_an_error() {
    let arch = ArchitectureSpec::parse(TINY_ARCH).unwrap();
    let data = tiny_dataset(4, 31);
    // lr * weight_decay >> 2 multiplies parameters by a growing factor every
    // step, overflowing single-precision storage within a few epochs.
    let config = TrainConfig {
        epochs: 40,
        seed: 33,
        batch_size: 4,
        learning_rate: 1e8,
        weight_decay: 1.0,
        loss_divisor: LossDivisor::Fixed(1.0),
        ..Default::default()
    };
    match train(&arch, &data, None, &config) {
        Err(mpf_core::Error::Diverged { .. }) => {}
        Err(other) => panic!("expected divergence, got {other}"),
        Ok(_) => panic!("an exploding update rule should trip the divergence detector"),
    }
}

#[test]
fn fixed_divisor_matches_manual_scaling() {
    // Fixed(2.0) on batch size 2 equals BatchSize exactly.
    let arch = ArchitectureSpec::parse(TINY_ARCH).unwrap();
    let data = tiny_dataset(4, 35);
    let mut ca = quick_config(1, 37);
    ca.batch_size = 2;
    ca.loss_divisor = LossDivisor::BatchSize;
    let mut cb = ca.clone();
    cb.loss_divisor = LossDivisor::Fixed(2.0);
    let a = train(&arch, &data, None, &ca).unwrap();
    let b = train(&arch, &data, None, &cb).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
}
