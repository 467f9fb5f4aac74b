//! The full pipeline, per seed: natural victim, adversarially retrained
//! victims, extraction of every victim at every budget, metrics, reports.
//!
//! Each unit of work is a stage recorded in `out/<id>/manifest.json`. A rerun
//! skips stages whose record is complete and whose outputs still hash to the
//! recorded values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use xlab_core::attack::{adversarial_retrain, AdvTrainConfig, AttackConfig, Technique};
use xlab_core::data::LabeledDataset;
use xlab_core::extraction::{extract, ExtractionConfig, LocalOracle, Oracle};
use xlab_core::metrics::{
    agreement, craft_grid, extraction_gains, AdvGrid, CraftedGrid, ExtractionReport, GainTable, VictimType,
};
use xlab_core::model::Model;
use xlab_core::train::{evaluate_accuracy, train};

use crate::client::RemoteOracle;
use crate::config::{ExperimentConfig, OracleMode, SeedData};
use crate::error::{Result, XlabError};
use crate::io;
use crate::service::{spawn_model, ServiceConfig};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORTS_CSV: &str = "reports.csv";
pub const REPORTS_JSON: &str = "reports.json";
pub const VICTIMS_CSV: &str = "victims.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    /// Relative to the experiment directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    pub outputs: Vec<OutputRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub experiment_id: String,
    pub config_sha256: String,
    pub stages: BTreeMap<String, StageRecord>,
}

/// A trained victim and its own evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VictimReport {
    pub victim_id: String,
    pub victim_type: VictimType,
    pub seed: u64,
    pub test_acc: f64,
    /// White-box accuracy on examples crafted against the victim.
    pub adv_grid: AdvGrid,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportDocument {
    pub schema_version: u32,
    pub experiment_id: String,
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub victims: Vec<VictimReport>,
    pub extractions: Vec<ExtractionReport>,
    pub gains: GainTable,
    /// Wall-clock seconds per stage as recorded when the stage ran.
    pub timings: BTreeMap<String, f64>,
}

/// What a run produced and how much of it was recomputed.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub victims: Vec<VictimReport>,
    pub extractions: Vec<ExtractionReport>,
    pub gains: GainTable,
    pub stages_run: usize,
    pub stages_skipped: usize,
}

/// Victim types of the configured matrix, natural first.
pub fn victim_types(cfg: &ExperimentConfig) -> Vec<VictimType> {
    let mut v = vec![VictimType::Natural];
    for &technique in &cfg.adversarial.techniques {
        for &epsilon in &cfg.adversarial.epsilons {
            v.push(VictimType::Adversarial { technique, epsilon });
        }
    }
    v
}

/// File-name form of a victim type: `natural`, `adv-pgd-0.1`.
pub fn slug(v: &VictimType) -> String {
    match v {
        VictimType::Natural => "natural".into(),
        VictimType::Adversarial { technique, epsilon } => format!("adv-{technique}-{epsilon}"),
    }
}

fn victim_stage(seed: u64, v: &VictimType) -> String {
    format!("seed-{seed}/victim/{}", slug(v))
}

fn extract_stage(seed: u64, v: &VictimType, budget: usize) -> String {
    format!("seed-{seed}/extract/{}/b{budget}", slug(v))
}

struct Runner {
    dir: PathBuf,
    manifest: Manifest,
    stages_run: usize,
    stages_skipped: usize,
}

impl Runner {
    fn open(cfg: &ExperimentConfig) -> Result<Self> {
        let dir = cfg.experiment_dir();
        let hash = cfg.content_hash();
        let path = dir.join(MANIFEST_FILE);
        let manifest = if path.exists() {
            let m: Manifest = serde_json::from_slice(&io::read(&path)?)?;
            if m.schema_version != MANIFEST_SCHEMA_VERSION {
                return Err(xlab_core::Error::UnsupportedVersion(m.schema_version).into());
            }
            if m.config_sha256 != hash {
                return Err(XlabError::config(
                    "id",
                    format!(
                        "{} holds results of a different configuration; choose another id or out_dir",
                        dir.display()
                    ),
                ));
            }
            m
        } else {
            Manifest {
                schema_version: MANIFEST_SCHEMA_VERSION,
                experiment_id: cfg.id.clone(),
                config_sha256: hash,
                stages: BTreeMap::new(),
            }
        };
        Ok(Self {
            dir,
            manifest,
            stages_run: 0,
            stages_skipped: 0,
        })
    }

    fn save_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        io::write_atomic(self.dir.join(MANIFEST_FILE), text.as_bytes())
    }

    /// The stage's result if it completed and its outputs are intact.
    fn completed<T: for<'de> Deserialize<'de>>(&self, stage: &str) -> Option<T> {
        let rec = self.manifest.stages.get(stage)?;
        if rec.status != StageStatus::Completed {
            return None;
        }
        for out in &rec.outputs {
            match io::sha256_file(self.dir.join(&out.path)) {
                Ok(h) if h == out.sha256 => {}
                _ => return None,
            }
        }
        serde_json::from_value(rec.result.clone()?).ok()
    }

    /// Runs `body` unless the stage is already complete. `body` returns the
    /// stage result and the files it wrote (relative paths).
    fn stage<T, F>(&mut self, name: &str, body: F) -> Result<T>
    where
        T: Serialize + for<'de> Deserialize<'de>,
        F: FnOnce(&Path) -> Result<(T, Vec<PathBuf>)>,
    {
        if let Some(done) = self.completed::<T>(name) {
            self.stages_skipped += 1;
            return Ok(done);
        }
        let start = Instant::now();
        let outcome = body(&self.dir).and_then(|(value, files)| {
            let outputs = files
                .into_iter()
                .map(|path| {
                    let sha256 = io::sha256_file(self.dir.join(&path))?;
                    Ok(OutputRecord { path, sha256 })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((value, outputs))
        });
        let seconds = start.elapsed().as_secs_f64();
        self.stages_run += 1;
        match outcome {
            Ok((value, outputs)) => {
                self.manifest.stages.insert(
                    name.to_string(),
                    StageRecord {
                        status: StageStatus::Completed,
                        outputs,
                        result: Some(serde_json::to_value(&value)?),
                        error: None,
                        seconds,
                    },
                );
                self.save_manifest()?;
                Ok(value)
            }
            Err(e) => {
                self.manifest.stages.insert(
                    name.to_string(),
                    StageRecord {
                        status: StageStatus::Failed,
                        outputs: Vec::new(),
                        result: None,
                        error: Some(e.to_string()),
                        seconds,
                    },
                );
                self.save_manifest()?;
                Err(XlabError::Stage {
                    stage: name.to_string(),
                    source: Box::new(e),
                })
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct VictimStage {
    report: VictimReport,
    checkpoint: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct ExtractStage {
    report: ExtractionReport,
    checkpoint: PathBuf,
}

/// Heldout prefix used for adversarial grids.
pub fn grid_subset(cfg: &ExperimentConfig, test: &LabeledDataset) -> Result<LabeledDataset> {
    match cfg.metrics.grid_samples {
        Some(n) if n < test.len() => Ok(test.subset(&(0..n).collect::<Vec<_>>())?),
        _ => Ok(test.clone()),
    }
}

fn seed_dir(seed: u64) -> PathBuf {
    PathBuf::from(seed.to_string())
}

fn victim_model(
    cfg: &ExperimentConfig,
    seed: u64,
    v: &VictimType,
    data: &SeedData,
    natural: Option<&Model>,
) -> Result<Model> {
    let tc = xlab_core::train::TrainConfig {
        seed,
        ..cfg.victim.train.clone()
    };
    match v {
        VictimType::Natural => {
            let fresh = Model::build(cfg.victim_spec()?, seed)?;
            Ok(train(fresh, &data.train, &tc)?.0)
        }
        VictimType::Adversarial { technique, epsilon } => {
            let natural = natural.expect("natural victim is trained first");
            let adv = AdvTrainConfig {
                attack: AttackConfig::preset(*technique, *epsilon),
            };
            Ok(adversarial_retrain(natural, &data.train, &adv, &tc)?)
        }
    }
}

fn oracle_for(cfg: &ExperimentConfig, victim: &Model, id: &str, budget: usize, log: PathBuf) -> Result<OracleHandle> {
    match cfg.oracle {
        OracleMode::Local => Ok(OracleHandle::Local(
            LocalOracle::new(victim.clone(), id).with_budget(budget),
        )),
        OracleMode::Service => {
            let service = spawn_model(
                victim.clone(),
                &ServiceConfig {
                    bind: "127.0.0.1:0".into(),
                    checkpoint: PathBuf::new(),
                    budget: Some(budget),
                    max_batch: cfg.extraction.query_batch,
                    log: Some(log),
                },
            )?;
            let client = RemoteOracle::connect(&service.url())?.with_client_id(id);
            Ok(OracleHandle::Remote {
                oracle: client,
                _service: service,
            })
        }
    }
}

enum OracleHandle {
    Local(LocalOracle),
    /// The service stays up for as long as the handle lives.
    Remote {
        oracle: RemoteOracle,
        _service: crate::service::RunningService,
    },
}

impl OracleHandle {
    fn oracle(&self) -> &dyn Oracle {
        match self {
            Self::Local(o) => o,
            Self::Remote { oracle, .. } => oracle,
        }
    }
}

/// Runs (or resumes) every stage for every configured seed and writes the
/// reports.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut runner = Runner::open(cfg)?;
    let types = victim_types(cfg);
    let mut victims = Vec::new();
    let mut extractions = Vec::new();
    for &seed in &cfg.seeds {
        let data = cfg.seed_data(seed)?;
        let grid_test = grid_subset(cfg, &data.test)?;
        let ckpt_dir = seed_dir(seed).join("checkpoints");
        let mut natural: Option<Model> = None;
        for v in &types {
            let victim_id = v.to_string();
            let ckpt = ckpt_dir.join(format!("victim-{}.xlab", slug(v)));
            // Crafted grids are needed by the victim stage and by every
            // extraction stage that has to run; build them at most once.
            let mut crafted: Option<CraftedGrid> = None;
            let craft = |m: &Model| craft_grid(m, &grid_test, &cfg.metrics.techniques, &cfg.metrics.epsilons);

            let vs: VictimStage = runner.stage(&victim_stage(seed, v), |dir| {
                let model = victim_model(cfg, seed, v, &data, natural.as_ref())?;
                io::save_model(dir.join(&ckpt), &model)?;
                let grid = craft(&model)?;
                let report = VictimReport {
                    victim_id: victim_id.clone(),
                    victim_type: *v,
                    seed,
                    test_acc: evaluate_accuracy(&model, &data.test)?,
                    adv_grid: grid.evaluate(&model)?,
                };
                Ok((
                    VictimStage {
                        report,
                        checkpoint: ckpt.clone(),
                    },
                    vec![ckpt.clone()],
                ))
            })?;
            let victim = io::load_model(runner.dir.join(&vs.checkpoint))?;
            victims.push(vs.report);

            for &budget in &cfg.extraction.budgets {
                let surrogate_ckpt = ckpt_dir.join(format!("surrogate-{}-b{budget}.xlab", slug(v)));
                let ts_stem = seed_dir(seed)
                    .join("transfersets")
                    .join(format!("{}-b{budget}", slug(v)));
                let log = runner
                    .dir
                    .join(seed_dir(seed))
                    .join("logs")
                    .join(format!("{}-b{budget}.jsonl", slug(v)));
                let es: ExtractStage = runner.stage(&extract_stage(seed, v, budget), |dir| {
                    let handle = oracle_for(cfg, &victim, &victim_id, budget, log)?;
                    let mut ec = ExtractionConfig::new(
                        budget,
                        cfg.surrogate_spec()?,
                        xlab_core::train::TrainConfig {
                            seed,
                            ..cfg.extraction.surrogate.train.clone()
                        },
                        seed,
                    );
                    ec.query_batch = cfg.extraction.query_batch;
                    let ex = extract(handle.oracle(), &data.pool, &ec)?;
                    drop(handle);
                    let mut files = vec![surrogate_ckpt.clone()];
                    io::save_model(dir.join(&surrogate_ckpt), &ex.surrogate)?;
                    if cfg.extraction.save_transfersets {
                        io::save_transferset(dir.join(&ts_stem), &ex.transferset)?;
                        files.push(ts_stem.with_extension("json"));
                        files.push(ts_stem.with_extension("xlts"));
                    }
                    if crafted.is_none() {
                        crafted = Some(craft(&victim)?);
                    }
                    let s = &ex.surrogate;
                    let report = ExtractionReport {
                        victim_id: victim_id.clone(),
                        victim_type: *v,
                        budget,
                        seed,
                        test_acc: evaluate_accuracy(s, &data.test)?,
                        agreement: agreement(s, &victim, data.test.inputs())?,
                        adv_grid: craft(s)?.evaluate(s)?,
                        transfer_grid: crafted.as_ref().expect("crafted above").evaluate(s)?,
                        queries_used: ex.queries_used,
                    };
                    Ok((
                        ExtractStage {
                            report,
                            checkpoint: surrogate_ckpt.clone(),
                        },
                        files,
                    ))
                })?;
                extractions.push(es.report);
            }
            if v.is_natural() {
                natural = Some(victim);
            }
        }
    }
    let gains = extraction_gains(&extractions)?;
    let dir = runner.dir.clone();
    write_reports(cfg, &runner.manifest, &victims, &extractions, &gains)?;
    Ok(RunOutcome {
        dir,
        victims,
        extractions,
        gains,
        stages_run: runner.stages_run,
        stages_skipped: runner.stages_skipped,
    })
}

fn grid_columns(prefix: &str, techniques: &[Technique], epsilons: &[f32]) -> Vec<(String, Technique, f32)> {
    let mut cols = Vec::new();
    for &t in techniques {
        for &e in epsilons {
            cols.push((format!("{prefix}_{t}_{e}"), t, e));
        }
    }
    cols
}

fn victim_columns(v: &VictimType) -> (String, String) {
    match v {
        VictimType::Natural => ("none".into(), "0".into()),
        VictimType::Adversarial { technique, epsilon } => (technique.to_string(), epsilon.to_string()),
    }
}

fn grid_value(grid: &AdvGrid, t: Technique, e: f32) -> Result<String> {
    grid.get(t, e)
        .map(|a| a.to_string())
        .ok_or_else(|| XlabError::Json(format!("grid lacks {t} at epsilon {e}")))
}

/// One row per victim × budget × seed, in run order.
pub fn extraction_csv(cfg: &ExperimentConfig, reports: &[ExtractionReport]) -> Result<Vec<u8>> {
    let adv = grid_columns("adv", &cfg.metrics.techniques, &cfg.metrics.epsilons);
    let transfer = grid_columns("transfer", &cfg.metrics.techniques, &cfg.metrics.epsilons);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["victim_type", "technique", "epsilon", "budget", "seed", "test_acc", "agreement"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(adv.iter().chain(&transfer).map(|c| c.0.clone()));
    w.write_record(&header)?;
    for r in reports {
        let (technique, epsilon) = victim_columns(&r.victim_type);
        let mut row = vec![
            r.victim_type.family(),
            technique,
            epsilon,
            r.budget.to_string(),
            r.seed.to_string(),
            r.test_acc.to_string(),
            r.agreement.to_string(),
        ];
        for (_, t, e) in &adv {
            row.push(grid_value(&r.adv_grid, *t, *e)?);
        }
        for (_, t, e) in &transfer {
            row.push(grid_value(&r.transfer_grid, *t, *e)?);
        }
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| XlabError::Csv(e.to_string()))
}

/// One row per victim × seed.
pub fn victims_csv(cfg: &ExperimentConfig, victims: &[VictimReport]) -> Result<Vec<u8>> {
    let adv = grid_columns("adv", &cfg.metrics.techniques, &cfg.metrics.epsilons);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["victim_type", "technique", "epsilon", "seed", "test_acc"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(adv.iter().map(|c| c.0.clone()));
    w.write_record(&header)?;
    for v in victims {
        let (technique, epsilon) = victim_columns(&v.victim_type);
        let mut row = vec![
            v.victim_type.family(),
            technique,
            epsilon,
            v.seed.to_string(),
            v.test_acc.to_string(),
        ];
        for (_, t, e) in &adv {
            row.push(grid_value(&v.adv_grid, *t, *e)?);
        }
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| XlabError::Csv(e.to_string()))
}

fn write_reports(
    cfg: &ExperimentConfig,
    manifest: &Manifest,
    victims: &[VictimReport],
    extractions: &[ExtractionReport],
    gains: &GainTable,
) -> Result<()> {
    let dir = cfg.experiment_dir();
    io::write_atomic(dir.join(REPORTS_CSV), &extraction_csv(cfg, extractions)?)?;
    io::write_atomic(dir.join(VICTIMS_CSV), &victims_csv(cfg, victims)?)?;
    let doc = ReportDocument {
        schema_version: REPORT_SCHEMA_VERSION,
        experiment_id: cfg.id.clone(),
        config_sha256: cfg.content_hash(),
        config: cfg.clone(),
        victims: victims.to_vec(),
        extractions: extractions.to_vec(),
        gains: gains.clone(),
        timings: manifest
            .stages
            .iter()
            .map(|(k, r)| (k.clone(), r.seconds))
            .collect(),
    };
    io::write_atomic(dir.join(REPORTS_JSON), serde_json::to_string_pretty(&doc)?.as_bytes())
}

/// Reads `reports.json` of an experiment directory.
pub fn load_reports(dir: impl AsRef<Path>) -> Result<ReportDocument> {
    let doc: ReportDocument = serde_json::from_slice(&io::read(dir.as_ref().join(REPORTS_JSON))?)?;
    if doc.schema_version != REPORT_SCHEMA_VERSION {
        return Err(xlab_core::Error::UnsupportedVersion(doc.schema_version).into());
    }
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use xlab_core::metrics::GridPoint;

    #[test]
    fn slugs_and_columns() {
        let v = VictimType::Adversarial {
            technique: Technique::Pgd,
            epsilon: 0.1,
        };
        assert_eq!(slug(&v), "adv-pgd-0.1");
        assert_eq!(slug(&VictimType::Natural), "natural");
        assert_eq!(victim_columns(&v), ("pgd".into(), "0.1".into()));
        let cols = grid_columns("adv", &[Technique::Fgsm], &[0.01, 0.3]);
        assert_eq!(cols[0].0, "adv_fgsm_0.01");
        assert_eq!(cols[1].0, "adv_fgsm_0.3");
    }

    #[test]
    fn csv_layout() {
        let mut cfg = ExperimentConfig::desk();
        cfg.metrics.techniques = vec![Technique::Fgsm];
        cfg.metrics.epsilons = vec![0.1];
        let grid = AdvGrid {
            points: vec![GridPoint {
                technique: Technique::Fgsm,
                epsilon: 0.1,
                accuracy: 0.5,
            }],
        };
        let r = ExtractionReport {
            victim_id: "natural".into(),
            victim_type: VictimType::Natural,
            budget: 250,
            seed: 1,
            test_acc: 0.75,
            agreement: 0.8,
            adv_grid: grid.clone(),
            transfer_grid: grid,
            queries_used: 250,
        };
        let text = String::from_utf8(extraction_csv(&cfg, &[r]).unwrap()).unwrap();
        assert_eq!(
            text,
            "victim_type,technique,epsilon,budget,seed,test_acc,agreement,adv_fgsm_0.1,transfer_fgsm_0.1\n\
             natural,none,0,250,1,0.75,0.8,0.5,0.5\n"
        );
    }

    #[test]
    fn victim_matrix_order() {
        let cfg = ExperimentConfig::desk();
        let names: Vec<String> = victim_types(&cfg).iter().map(|v| v.to_string()).collect();
        assert_eq!(
            names,
            ["natural", "adv-fgsm(0.05)", "adv-fgsm(0.1)", "adv-pgd(0.05)", "adv-pgd(0.1)"]
        );
    }
}
