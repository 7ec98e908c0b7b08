use ffce::{
    checkpoint::Checkpoint,
    manifest::Dataset,
    synth::{generate, SynthConfig},
    train::{TrainConfig, Trainer},
    volume::{LabelVolume, Volume},
};
use ffce_core::{optim::batches_per_epoch, ClassWeights, NetworkConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn network() -> NetworkConfig {
    NetworkConfig {
        num_classes: 4,
        stack_depth: 2,
        channels: 4,
        codewords: 2,
        kernel_size: 3,
        ..NetworkConfig::default()
    }
}

fn config(epochs: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 3,
        seed: 11,
        ..TrainConfig::default()
    }
}

/// Two synthetic volumes cropped to their first five coronal planes.
fn synthetic() -> Dataset {
    let pairs = generate(&SynthConfig {
        seed: 3,
        volumes: 2,
        dims: [16, 16, 16],
        classes: 4,
    })
    .unwrap()
    .into_iter()
    .map(|(v, l)| {
        let dims = [5, 16, 16];
        (
            Volume::new(dims, v.data[..5 * 256].to_vec()).unwrap(),
            LabelVolume::new(dims, l.data[..5 * 256].to_vec()).unwrap(),
        )
    })
    .collect();
    Dataset::new(pairs, 4, 2).unwrap()
}

/// Labels in 4×4 tiles cycling through the classes, so every class covers
/// exactly a quarter of the voxels.
fn balanced() -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dims = [4, 16, 16];
    let labels: Vec<u16> = (0..4 * 256)
        .map(|i| {
            let (z, y, x) = (i / 256, (i / 16) % 16, i % 16);
            ((z + y / 4 + x / 4) % 4) as u16
        })
        .collect();
    let data = labels
        .iter()
        .map(|&l| l as f32 / 3.0 + rng.gen_range(-0.05..0.05))
        .collect();
    let pair = (
        Volume::new(dims, data).unwrap(),
        LabelVolume::new(dims, labels).unwrap(),
    );
    Dataset::new(vec![pair], 4, 2).unwrap()
}

fn bytes(t: &Trainer) -> Vec<u8> {
    Checkpoint::from_trainer(t).to_bytes()
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let data = synthetic();
    let run = || {
        let mut t = Trainer::new(network(), config(2)).unwrap();
        let a = t.train_epoch(&data).unwrap();
        let b = t.train_epoch(&data).unwrap();
        (bytes(&t), a, b)
    };
    let (first, second) = (run(), run());
    assert_eq!(first, second);
    let mut other = Trainer::new(network(), TrainConfig { seed: 12, ..config(2) }).unwrap();
    other.train_epoch(&data).unwrap();
    other.train_epoch(&data).unwrap();
    assert_ne!(bytes(&other), first.0);
}

#[test]
fn resume_equals_uninterrupted_training() {
    let data = synthetic();
    let mut straight = Trainer::new(network(), config(3)).unwrap();
    for _ in 0..3 {
        straight.train_epoch(&data).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ffck");
    let mut first = Trainer::new(network(), config(3)).unwrap();
    first.train_epoch(&data).unwrap();
    Checkpoint::from_trainer(&first).write(&path).unwrap();
    drop(first);
    let mut resumed = Checkpoint::read(&path).unwrap().into_trainer().unwrap();
    assert_eq!(resumed.epoch, 1);
    resumed.train_epoch(&data).unwrap();
    resumed.train_epoch(&data).unwrap();
    assert_eq!(bytes(&resumed), bytes(&straight));
}

#[test]
fn iteration_counter_advances_per_batch() {
    let data = synthetic();
    let mut t = Trainer::new(network(), config(2)).unwrap();
    t.train_epoch(&data).unwrap();
    assert_eq!(t.optimizer.iteration, batches_per_epoch(10, 3) as u64);
    assert_eq!(t.optimizer.iteration, 4);
    t.train_epoch(&data).unwrap();
    assert_eq!(t.optimizer.iteration, 8);
    assert_eq!(t.epoch, 2);
    assert!(t.train_epoch(&data).is_err(), "schedule exhausted");
}

#[test]
fn class_weights_are_inert_for_balanced_data() {
    let data = balanced();
    assert_eq!(data.class_counts(), vec![256; 4]);
    let mut plain = Trainer::new(network(), config(2)).unwrap();
    let mut weighted = Trainer::new(
        network(),
        TrainConfig {
            class_weights: true,
            ..config(2)
        },
    )
    .unwrap();
    assert_eq!(weighted.class_weights(&data).unwrap(), ClassWeights::uniform(4));
    for _ in 0..2 {
        let (a, b) = (plain.train_epoch(&data).unwrap(), weighted.train_epoch(&data).unwrap());
        assert_eq!(a, b);
        assert_eq!(plain.net.store(), weighted.net.store());
    }
    assert_eq!(plain.optimizer, weighted.optimizer);
}

#[test]
fn class_weights_change_training_on_imbalanced_data() {
    let data = synthetic();
    let omega = ClassWeights::from_counts(&data.class_counts()).unwrap();
    assert!(omega.omega().iter().any(|&w| w != 1.0));
    let mut plain = Trainer::new(network(), config(1)).unwrap();
    let mut weighted = Trainer::new(
        network(),
        TrainConfig {
            class_weights: true,
            ..config(1)
        },
    )
    .unwrap();
    plain.train_epoch(&data).unwrap();
    weighted.train_epoch(&data).unwrap();
    assert_ne!(plain.net.store(), weighted.net.store());
}

#[test]
fn single_sample_loss_decreases() {
    let mut data = synthetic();
    data.volumes.truncate(1);
    let sample = data.sample(2).unwrap();
    let config = TrainConfig {
        batch_size: 1,
        seed: 2,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(
        NetworkConfig {
            dropout_rate: 0.0,
            ..network()
        },
        config,
    )
    .unwrap();
    let omega = ClassWeights::uniform(4);
    let losses: Vec<f64> = (0..10)
        .map(|_| t.step(std::slice::from_ref(&sample), &omega, 100).unwrap().total)
        .collect();
    let drop = losses[0] - losses[9];
    assert!(drop >= 0.1 * losses[0].abs(), "{losses:?}");
}

#[test]
fn mismatched_dataset_is_rejected() {
    let data = synthetic();
    let mut t = Trainer::new(
        NetworkConfig {
            num_classes: 5,
            ..network()
        },
        config(1),
    )
    .unwrap();
    assert!(t.train_epoch(&data).is_err());
    assert!(Trainer::new(
        network(),
        TrainConfig {
            batch_size: 0,
            ..config(1)
        }
    )
    .is_err());
}
