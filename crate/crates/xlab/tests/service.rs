//! Prediction service and remote oracle over loopback HTTP.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use xlab::client::RemoteOracle;
use xlab::service::{spawn, spawn_model, QueryLogRecord, RunningService, ServiceConfig};
use xlab_core::error::Error;
use xlab_core::extraction::{check_probability_rows, Oracle};
use xlab_core::model::{Model, ModelSpec};
use xlab_core::Tensor;

fn victim() -> Model {
    Model::build(ModelSpec::cnn_small([1, 16, 16], 10), 11).unwrap()
}

fn config(budget: Option<usize>, max_batch: usize) -> ServiceConfig {
    ServiceConfig {
        bind: "127.0.0.1:0".into(),
        checkpoint: Default::default(),
        budget,
        max_batch,
        log: None,
    }
}

fn batch(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new([n, 1, 16, 16], (0..n * 256).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn post(service: &RunningService, body: &Value) -> (u16, Value) {
    let r = reqwest::blocking::Client::new()
        .post(format!("{}/v1/predict", service.url()))
        .json(body)
        .send()
        .unwrap();
    (r.status().as_u16(), r.json().unwrap())
}

#[test]
fn health_reports_model_metadata_only() {
    let s = spawn_model(victim(), &config(None, 8)).unwrap();
    let h: Value = reqwest::blocking::get(format!("{}/v1/health", s.url()))
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(
        h,
        json!({ "status": "ok", "model_name": "cnn-small", "num_classes": 10, "input_shape": [1, 16, 16] })
    );
}

#[test]
fn remote_matches_local_predictions() {
    let m = victim();
    let s = spawn_model(m.clone(), &config(None, 64)).unwrap();
    let remote = RemoteOracle::connect(&s.url()).unwrap();
    assert_eq!(remote.num_classes(), 10);
    let x = batch(48, 3);
    let got = remote.query(&x).unwrap();
    check_probability_rows(&got).unwrap();
    let want = m.predict_proba(&x).unwrap();
    let diff = got
        .data()
        .iter()
        .zip(want.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(diff < 1e-6, "max abs diff {diff}");
    assert_eq!(remote.queries_used(), 48);
    assert_eq!(remote.budget_remaining(), None);
}

#[test]
fn oversized_batches_are_refused_without_spending_budget() {
    let s = spawn_model(victim(), &config(Some(100), 8)).unwrap();
    let remote = RemoteOracle::connect(&s.url()).unwrap();
    assert_eq!(remote.query(&batch(9, 0)), Err(Error::BatchTooLarge { size: 9, max: 8 }));
    assert_eq!(s.queries_used(), 0);
    assert_eq!(remote.query(&batch(8, 0)).unwrap().shape(), &[8, 10]);
    assert_eq!(s.queries_used(), 8);
}

#[test]
fn exhausted_budget_returns_no_probabilities() {
    let s = spawn_model(victim(), &config(Some(10), 8)).unwrap();
    let remote = RemoteOracle::connect(&s.url()).unwrap();
    remote.query(&batch(6, 1)).unwrap();
    assert_eq!(remote.budget_remaining(), Some(4));
    assert_eq!(remote.query(&batch(5, 1)), Err(Error::BudgetExhausted { used: 6 }));
    remote.query(&batch(4, 1)).unwrap();
    let x = batch(1, 2);
    let (status, body) = post(&s, &json!({ "inputs": [x.data()], "shape": [1, 16, 16] }));
    assert_eq!(status, 429);
    assert_eq!(body["queries_used"], 10);
    assert!(body.get("probs").is_none());
    let stats = remote.stats().unwrap();
    assert_eq!((stats.queries_used, stats.budget_remaining), (10, Some(0)));
}

#[test]
fn malformed_requests_are_rejected_for_free() {
    let s = spawn_model(victim(), &config(Some(10), 8)).unwrap();
    let (status, body) = post(&s, &json!({ "inputs": [vec![0.5f32; 256]], "shape": [1, 8, 32] }));
    assert_eq!((status, body["error"]["kind"].as_str()), (400, Some("shape_mismatch")));
    let (status, _) = post(&s, &json!({ "inputs": [vec![0.5f32; 255]], "shape": [1, 16, 16] }));
    assert_eq!(status, 400);
    let (status, _) = post(&s, &json!({ "pixels": [] }));
    assert_eq!(status, 400);
    let (status, _) = post(&s, &json!({ "inputs": [], "shape": [1, 16, 16] }));
    assert_eq!(status, 400);
    assert_eq!(s.queries_used(), 0);
}

fn spend_concurrently(clients: usize, batch_size: usize, budget: usize) -> (usize, RunningService, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServiceConfig {
        log: Some(dir.path().join("queries.jsonl")),
        ..config(Some(budget), 16)
    };
    let s = spawn_model(victim(), &cfg).unwrap();
    let url = Arc::new(s.url());
    let handles: Vec<_> = (0..clients)
        .map(|c| {
            let url = Arc::clone(&url);
            std::thread::spawn(move || {
                let o = RemoteOracle::connect(&url).unwrap().with_client_id(format!("client-{c}"));
                let x = batch(batch_size, c as u64);
                let mut served = 0;
                loop {
                    match o.query(&x) {
                        Ok(p) => served += p.shape()[0],
                        Err(Error::BudgetExhausted { .. }) => break,
                        Err(e) => panic!("{e}"),
                    }
                }
                assert_eq!(o.queries_used(), served);
                served
            })
        })
        .collect();
    let total = handles.into_iter().map(|h| h.join().unwrap()).sum();
    (total, s, dir)
}

#[test]
fn shared_budget_is_never_overspent() {
    for clients in [2, 4] {
        let (total, s, dir) = spend_concurrently(clients, 5, 100);
        assert_eq!(total, 100);
        assert_eq!(s.queries_used(), 100);
        s.shutdown().unwrap();
        let log = std::fs::read_to_string(dir.path().join("queries.jsonl")).unwrap();
        let records: Vec<QueryLogRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(records.len(), 20);
        let mut prev = 0;
        for r in &records {
            assert_eq!(r.cumulative, prev + r.batch_size);
            assert!(r.client.starts_with("client-"));
            prev = r.cumulative;
        }
        assert_eq!(prev, 100);
    }
}

#[test]
fn serve_fails_cleanly() {
    let missing = ServiceConfig {
        checkpoint: "/nonexistent/victim.xlab".into(),
        ..config(None, 8)
    };
    assert_eq!(spawn(&missing).err().unwrap().kind(), "io");
    let s = spawn_model(victim(), &config(None, 8)).unwrap();
    let taken = ServiceConfig {
        bind: s.addr.to_string(),
        ..config(None, 8)
    };
    assert_eq!(spawn_model(victim(), &taken).err().unwrap().kind(), "service");
    assert_eq!(spawn_model(victim(), &config(None, 0)).err().unwrap().kind(), "invalid_config");
}
