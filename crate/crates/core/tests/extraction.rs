//! Transfer-set construction and the oracle budget contract.

use std::sync::Arc;
use std::thread;

use xlab_core::data::Role;
use xlab_core::error::Error;
use xlab_core::extraction::{
    build_transferset, extract, ExtractionConfig, LocalOracle, Oracle, ROW_SUM_TOL,
};
use xlab_core::metrics::agreement;
use xlab_core::model::{Model, ModelSpec};
use xlab_core::synth::{synth_generate, SynthConfig};
use xlab_core::train::TrainConfig;
use xlab_core::Tensor;

fn victim() -> Model {
    Model::build(ModelSpec::cnn_small([1, 16, 16], 10), 4).unwrap()
}

fn pool(n_per_class: usize) -> xlab_core::data::LabeledDataset {
    let cfg = SynthConfig {
        template_seed: 900,
        ..SynthConfig::new("pool", 10, n_per_class)
    };
    synth_generate(&cfg, Role::AdversaryPool).unwrap()
}

#[test]
fn budget_rows_and_row_sums() {
    let oracle = LocalOracle::new(victim(), "v");
    let p = pool(30);
    let ts = build_transferset(&oracle, &p, 100, 1, 64).unwrap();
    assert_eq!(ts.len(), 100);
    assert_eq!(ts.inputs().shape()[0], 100);
    for row in ts.soft_labels().data().chunks(10) {
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() <= ROW_SUM_TOL);
    }
    assert_eq!(oracle.queries_used(), 100);
    assert_eq!(ts.provenance.budget, 100);
    assert_eq!(ts.provenance.pool_id, "pool");
}

#[test]
fn soft_labels_are_the_oracle_outputs() {
    let oracle = LocalOracle::new(victim(), "v");
    let p = pool(10);
    let ts = build_transferset(&oracle, &p, 37, 5, 8).unwrap();
    let direct = oracle.model().predict_proba(ts.inputs()).unwrap();
    assert_eq!(direct.data(), ts.soft_labels().data());
}

#[test]
fn same_seed_same_transferset() {
    let p = pool(20);
    let a = build_transferset(&LocalOracle::new(victim(), "v"), &p, 77, 9, 16).unwrap();
    let b = build_transferset(&LocalOracle::new(victim(), "v"), &p, 77, 9, 64).unwrap();
    assert_eq!(a, b);
    let c = build_transferset(&LocalOracle::new(victim(), "v"), &p, 77, 10, 64).unwrap();
    assert_ne!(a.inputs(), c.inputs());
}

#[test]
fn budget_beyond_pool_is_rejected() {
    let p = pool(5);
    let oracle = LocalOracle::new(victim(), "v");
    assert_eq!(
        build_transferset(&oracle, &p, 51, 0, 64).unwrap_err(),
        Error::BudgetExceedsPool {
            budget: 51,
            pool: 50
        }
    );
    let cfg = ExtractionConfig::new(0, ModelSpec::mlp_wide([1, 16, 16], 10), TrainConfig::default(), 0);
    assert!(cfg.validate(50).is_err());
    assert_eq!(oracle.queries_used(), 0);
}

#[test]
fn exhausted_oracle_fails_loudly() {
    let p = pool(10);
    let oracle = LocalOracle::new(victim(), "v").with_budget(50);
    let err = build_transferset(&oracle, &p, 80, 0, 32).unwrap_err();
    assert!(matches!(err, Error::BudgetExhausted { .. }));
    assert!(oracle.queries_used() <= 50);
}

#[test]
fn oversized_batches_are_refused_without_spending() {
    let oracle = LocalOracle::new(victim(), "v").with_budget(100).with_max_batch(8);
    let x = Tensor::zeros([9, 1, 16, 16]);
    assert_eq!(
        oracle.query(&x).unwrap_err(),
        Error::BatchTooLarge { size: 9, max: 8 }
    );
    assert_eq!(oracle.queries_used(), 0);
}

#[test]
fn concurrent_clients_never_overspend() {
    let oracle = Arc::new(LocalOracle::new(victim(), "v").with_budget(100));
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let o = Arc::clone(&oracle);
            thread::spawn(move || {
                let x = Tensor::zeros([3, 1, 16, 16]);
                let mut served = 0;
                while o.query(&x).is_ok() {
                    served += 3;
                }
                served
            })
        })
        .collect();
    let total: usize = handles.into_iter().map(|h| h.join().unwrap()).sum();
    assert_eq!(total, 99);
    assert_eq!(oracle.queries_used(), 99);
    assert_eq!(oracle.budget_remaining(), Some(1));
}

#[test]
fn extraction_is_deterministic_and_learns_the_victim() {
    let p = pool(40);
    let v = victim();
    let tc = TrainConfig {
        max_epochs: 5,
        ..TrainConfig::default()
    };
    let cfg = ExtractionConfig::new(300, ModelSpec::mlp_wide([1, 16, 16], 10), tc, 2);
    let a = extract(&LocalOracle::new(v.clone(), "v"), &p, &cfg).unwrap();
    let b = extract(&LocalOracle::new(v.clone(), "v"), &p, &cfg).unwrap();
    assert_eq!(a.surrogate, b.surrogate);
    assert_eq!(a.queries_used, 300);
    assert_eq!(a.surrogate.meta.tags.get("budget").map(String::as_str), Some("300"));
    let agr = agreement(&a.surrogate, &v, p.inputs()).unwrap();
    assert!((0.0..=1.0).contains(&agr));
}
