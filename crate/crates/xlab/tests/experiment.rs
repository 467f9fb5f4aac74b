//! Experiment runner: row accounting, resumption, failure records, service mode.

mod common;

use std::fs;

use xlab::config::OracleMode;
use xlab::experiment::{load_reports, run_experiment, Manifest, StageStatus, MANIFEST_FILE, REPORTS_CSV};

#[test]
fn natural_only_two_budgets_gives_two_rows_and_resumes() {
    let out = tempfile::tempdir().unwrap();
    let cfg = common::tiny("rows", out.path(), false);
    let first = run_experiment(&cfg).unwrap();
    assert_eq!(first.extractions.len(), 2);
    assert_eq!((first.stages_run, first.stages_skipped), (3, 0));
    let csv = fs::read_to_string(first.dir.join(REPORTS_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with(
        "victim_type,technique,epsilon,budget,seed,test_acc,agreement,adv_fgsm_0.1,transfer_fgsm_0.1\n"
    ));
    for r in &first.extractions {
        assert_eq!(r.queries_used, r.budget);
        assert!((0.0..=1.0).contains(&r.agreement) && (0.0..=1.0).contains(&r.test_acc));
    }
    let ckpt = first.dir.join("0/checkpoints/victim-natural.xlab");
    let modified = fs::metadata(&ckpt).unwrap().modified().unwrap();

    let second = run_experiment(&cfg).unwrap();
    assert_eq!((second.stages_run, second.stages_skipped), (0, 3));
    assert_eq!(fs::read_to_string(second.dir.join(REPORTS_CSV)).unwrap(), csv);
    assert_eq!(fs::metadata(&ckpt).unwrap().modified().unwrap(), modified);

    // A damaged output reruns just its stage.
    fs::write(first.dir.join("0/checkpoints/surrogate-natural-b100.xlab"), b"junk").unwrap();
    let third = run_experiment(&cfg).unwrap();
    assert_eq!((third.stages_run, third.stages_skipped), (1, 2));
    assert_eq!(fs::read_to_string(third.dir.join(REPORTS_CSV)).unwrap(), csv);
}

#[test]
fn row_count_is_victims_times_budgets_times_seeds() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny("matrix", out.path(), true);
    cfg.seeds = vec![3, 4];
    let outcome = run_experiment(&cfg).unwrap();
    assert_eq!(outcome.extractions.len(), 2 * 2 * 2);
    assert_eq!(outcome.victims.len(), 2 * 2);
    let doc = load_reports(&outcome.dir).unwrap();
    assert_eq!(doc.extractions, outcome.extractions);
    assert_eq!(doc.gains.rows.len(), 2);
    assert_eq!(doc.schema_version, 1);
    assert!(outcome.victims.iter().any(|v| v.victim_type.to_string() == "adv-pgd(0.1)"));
}

#[test]
fn stage_failures_are_recorded() {
    let out = tempfile::tempdir().unwrap();
    let cfg = common::tiny("broken", out.path(), false);
    let seed_dir = cfg.experiment_dir().join("0");
    fs::create_dir_all(&seed_dir).unwrap();
    fs::write(seed_dir.join("checkpoints"), b"not a directory").unwrap();
    let err = run_experiment(&cfg).unwrap_err();
    assert_eq!(err.kind(), "io");
    let manifest: Manifest =
        serde_json::from_slice(&fs::read(cfg.experiment_dir().join(MANIFEST_FILE)).unwrap()).unwrap();
    let rec = &manifest.stages["seed-0/victim/natural"];
    assert_eq!(rec.status, StageStatus::Failed);
    assert!(rec.error.as_deref().unwrap().contains("checkpoints"));

    fs::remove_file(seed_dir.join("checkpoints")).unwrap();
    let outcome = run_experiment(&cfg).unwrap();
    assert_eq!(outcome.stages_run, 3);
}

#[test]
fn a_changed_config_does_not_reuse_results() {
    let out = tempfile::tempdir().unwrap();
    let cfg = common::tiny("changed", out.path(), false);
    run_experiment(&cfg).unwrap();
    let mut other = cfg.clone();
    other.extraction.budgets = vec![50, 150];
    assert_eq!(run_experiment(&other).unwrap_err().kind(), "invalid_config");
}

#[test]
fn service_mode_reproduces_local_reports() {
    let local_out = tempfile::tempdir().unwrap();
    let service_out = tempfile::tempdir().unwrap();
    let local = common::tiny("modes", local_out.path(), false);
    let mut service = common::tiny("modes", service_out.path(), false);
    service.oracle = OracleMode::Service;
    let a = run_experiment(&local).unwrap();
    let b = run_experiment(&service).unwrap();
    assert_eq!(
        fs::read(a.dir.join(REPORTS_CSV)).unwrap(),
        fs::read(b.dir.join(REPORTS_CSV)).unwrap()
    );
    let log = fs::read_to_string(b.dir.join("0/logs/natural-b100.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
}
