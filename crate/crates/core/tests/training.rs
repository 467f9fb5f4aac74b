//! Trainer behavior on small seeded problems.

use xlab_core::data::{one_hot, Role};
use xlab_core::error::Error;
use xlab_core::extraction::{Provenance, TransferSet};
use xlab_core::model::{Model, ModelSpec};
use xlab_core::synth::{synth_generate, SynthConfig};
use xlab_core::train::{evaluate_accuracy, lr_at, train, LabelMode, TrainConfig};

fn separable() -> xlab_core::data::LabeledDataset {
    let cfg = SynthConfig {
        noise: 0.05,
        contrast: 1.0,
        ..SynthConfig::new("separable", 2, 100)
    };
    synth_generate(&cfg, Role::VictimTrain).unwrap()
}

#[test]
fn mlp_wide_fits_a_separable_problem() {
    let data = separable();
    let tc = TrainConfig {
        max_epochs: 20,
        ..TrainConfig::default()
    };
    let model = Model::build(ModelSpec::mlp_wide([1, 16, 16], 2), 0).unwrap();
    let (model, history) = train(model, &data, &tc).unwrap();
    assert_eq!(history.records.len(), 20);
    assert!(history.last().unwrap().train_accuracy >= 0.99);
    assert!(evaluate_accuracy(&model, &data).unwrap() >= 0.99);
    assert_eq!(model.meta.epochs, 20);
}

#[test]
fn training_is_deterministic_given_seed() {
    let data = separable();
    let tc = TrainConfig {
        max_epochs: 3,
        seed: 11,
        ..TrainConfig::default()
    };
    let spec = ModelSpec::cnn_small([1, 16, 16], 2);
    let (a, ha) = train(Model::build(spec.clone(), 11).unwrap(), &data, &tc).unwrap();
    let (b, hb) = train(Model::build(spec, 11).unwrap(), &data, &tc).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
}

#[test]
fn one_hot_soft_labels_reduce_to_hard_training() {
    let data = separable();
    let hard_cfg = TrainConfig {
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let soft_cfg = TrainConfig {
        label_mode: LabelMode::Soft,
        ..hard_cfg.clone()
    };
    let soft = one_hot(data.labels(), 2).unwrap();
    let ts = TransferSet::new(
        data.inputs().clone(),
        soft,
        Provenance {
            oracle_id: "labels".into(),
            pool_id: data.name.clone(),
            seed: 0,
            budget: data.len(),
        },
    )
    .unwrap();
    let spec = ModelSpec::mlp_wide([1, 16, 16], 2);
    let (mh, hh) = train(Model::build(spec.clone(), 3).unwrap(), &data, &hard_cfg).unwrap();
    let (ms, hs) = train(Model::build(spec, 3).unwrap(), &ts, &soft_cfg).unwrap();
    assert_eq!(hh.records[0].mean_loss, hs.records[0].mean_loss);
    assert_eq!(mh.params(), ms.params());
}

#[test]
fn heldout_data_is_rejected() {
    let mut data = separable();
    data.role = Role::HeldoutTest;
    let model = Model::build(ModelSpec::mlp_wide([1, 16, 16], 2), 0).unwrap();
    let err = train(model, &data, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::RoleViolation(_)));
}

#[test]
fn step_schedule() {
    let tc = TrainConfig {
        initial_lr: 0.01,
        decay_factor: 0.1,
        decay_every: 60,
        max_epochs: 200,
        ..TrainConfig::default()
    };
    assert_eq!(lr_at(&tc, 0), 0.01);
    assert_eq!(lr_at(&tc, 59), 0.01);
    assert!((lr_at(&tc, 60) - 0.001).abs() < 1e-9);
    assert!((lr_at(&tc, 120) - 0.0001).abs() < 1e-10);
}
