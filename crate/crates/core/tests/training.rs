use bayesseg::io::checkpoint::encode;
use bayesseg::io::{generate_synthetic, SynthConfig};
use bayesseg::model::{ModelConfig, SegModel};
use bayesseg::train::{finalize_batchnorm, train_loop, TrainConfig};

fn three_class_set() -> bayesseg::io::Dataset {
    generate_synthetic(&SynthConfig {
        height: 32,
        width: 32,
        num_classes: 3,
        count: 8,
        seed: 4,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn thirty_epochs_lower_the_loss() {
    let ds = three_class_set();
    let mut model = SegModel::new(&ModelConfig {
        num_classes: 3,
        ..ModelConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let log = train_loop(&mut model, &ds, &cfg).unwrap();
    assert_eq!(log.len(), 30);
    assert!(
        log[29].loss < log[0].loss,
        "{} vs {}",
        log[29].loss,
        log[0].loss
    );
    assert!(log.iter().all(|e| e.loss.is_finite()));
}

#[test]
fn finalized_runs_are_bitwise_reproducible() {
    let ds = three_class_set();
    let run = || {
        let mut model = SegModel::new(&ModelConfig {
            num_classes: 3,
            stages: 2,
            features: 8,
            ..ModelConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 3,
            seed: 5,
            ..TrainConfig::default()
        };
        train_loop(&mut model, &ds, &cfg).unwrap();
        finalize_batchnorm(&mut model, &ds).unwrap();
        encode(&model)
    };
    assert_eq!(run(), run());
}
