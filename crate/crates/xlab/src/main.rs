use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use xlab::client::RemoteOracle;
use xlab::config::ExperimentConfig;
use xlab::error::{Result, XlabError};
use xlab::experiment::{grid_subset, run_experiment, slug};
use xlab::service::{serve_blocking, ServiceConfig};
use xlab::trends::run_trends;
use xlab::io;
use xlab_core::attack::{adversarial_retrain, attack, AdvTrainConfig, AttackConfig, Technique};
use xlab_core::extraction::{extract, ExtractionConfig, LocalOracle, Oracle};
use xlab_core::metrics::{adv_accuracy_grid, agreement, VictimType};
use xlab_core::model::Model;
use xlab_core::train::{evaluate_accuracy, train, TrainConfig};

#[derive(Parser)]
#[command(name = "xlab", version, about = "Adversarial training versus model extraction experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (TOML). The built-in desk config when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; `run` accepts it repeatedly to restrict the seed list.
    #[arg(long, global = true)]
    seed: Vec<u64>,
    /// Output root, overriding the config's `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the natural victim of one seed.
    Train,
    /// Adversarially retrain a victim of one seed.
    Advtrain {
        #[arg(long)]
        technique: Technique,
        #[arg(long)]
        epsilon: f32,
        /// Natural victim to craft against; trained from scratch when omitted.
        #[arg(long)]
        natural: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint under one attack on the seed's test set.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        technique: Technique,
        #[arg(long)]
        epsilon: f32,
    },
    /// Extract a surrogate from a local checkpoint or a running service.
    Extract {
        #[arg(long)]
        budget: usize,
        #[arg(long, conflicts_with = "oracle_url", required_unless_present = "oracle_url")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        oracle_url: Option<String>,
        /// Victim checkpoint used only to score agreement.
        #[arg(long)]
        victim: Option<PathBuf>,
    },
    /// Serve a checkpoint over HTTP until interrupted.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// Total samples to answer.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value_t = 256)]
        max_batch: usize,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Metrics battery for a checkpoint on the seed's test set.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Victim to score agreement against.
        #[arg(long)]
        victim: Option<PathBuf>,
    },
    /// Run or resume the full experiment.
    Run,
    /// Trend checks over a finished experiment.
    Trends,
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(out) = &g.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn one_seed(g: &Global) -> Result<u64> {
    match g.seed.as_slice() {
        [s] => Ok(*s),
        [] => Err(XlabError::config("--seed", "this command needs exactly one --seed")),
        _ => Err(XlabError::config("--seed", "this command takes a single --seed")),
    }
}

fn cli_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.experiment_dir().join(seed.to_string()).join("cli")
}

fn victim_train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.victim.train.clone()
    }
}

fn saved(path: &Path, model: &Model) -> Result<serde_json::Value> {
    let sha = io::save_model(path, model)?;
    Ok(json!({ "checkpoint": path, "sha256": sha }))
}

fn train_natural(cfg: &ExperimentConfig, seed: u64, data: &xlab::config::SeedData) -> Result<Model> {
    let fresh = Model::build(cfg.victim_spec()?, seed)?;
    Ok(train(fresh, &data.train, &victim_train_config(cfg, seed))?.0)
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let g = &cli.global;
    match cli.command {
        Command::Train => {
            let cfg = load_config(g)?;
            let seed = one_seed(g)?;
            let data = cfg.seed_data(seed)?;
            let model = train_natural(&cfg, seed, &data)?;
            let mut out = saved(&cli_dir(&cfg, seed).join("victim-natural.xlab"), &model)?;
            out["test_acc"] = json!(evaluate_accuracy(&model, &data.test)?);
            Ok(out)
        }
        Command::Advtrain {
            technique,
            epsilon,
            natural,
        } => {
            let cfg = load_config(g)?;
            let seed = one_seed(g)?;
            let data = cfg.seed_data(seed)?;
            let natural = match natural {
                Some(p) => io::load_model(p)?,
                None => train_natural(&cfg, seed, &data)?,
            };
            let adv = AdvTrainConfig {
                attack: AttackConfig::preset(technique, epsilon),
            };
            let model = adversarial_retrain(&natural, &data.train, &adv, &victim_train_config(&cfg, seed))?;
            let vt = VictimType::Adversarial { technique, epsilon };
            let path = cli_dir(&cfg, seed).join(format!("victim-{}.xlab", slug(&vt)));
            let mut out = saved(&path, &model)?;
            out["victim_type"] = json!(vt);
            out["test_acc"] = json!(evaluate_accuracy(&model, &data.test)?);
            Ok(out)
        }
        Command::Attack {
            checkpoint,
            technique,
            epsilon,
        } => {
            let cfg = load_config(g)?;
            let seed = one_seed(g)?;
            let data = cfg.seed_data(seed)?;
            let model = io::load_model(checkpoint)?;
            let ac = AttackConfig::preset(technique, epsilon);
            let adv = attack(&model, data.test.inputs(), data.test.labels(), &ac)?;
            let pred = model.predict_label(&adv)?;
            Ok(json!({
                "technique": technique,
                "epsilon": epsilon,
                "clean_accuracy": evaluate_accuracy(&model, &data.test)?,
                "adversarial_accuracy": xlab_core::metrics::accuracy(&pred, data.test.labels())?,
            }))
        }
        Command::Extract {
            budget,
            checkpoint,
            oracle_url,
            victim,
        } => {
            let cfg = load_config(g)?;
            let seed = one_seed(g)?;
            let data = cfg.seed_data(seed)?;
            let oracle: Box<dyn Oracle> = match (&checkpoint, &oracle_url) {
                (Some(p), _) => Box::new(LocalOracle::new(io::load_model(p)?, p.display().to_string())),
                (None, Some(url)) => Box::new(RemoteOracle::connect(url)?.with_client_id(format!("xlab-extract-{seed}"))),
                (None, None) => return Err(XlabError::config("--checkpoint", "or --oracle-url is required")),
            };
            let mut ec = ExtractionConfig::new(
                budget,
                cfg.surrogate_spec()?,
                TrainConfig {
                    seed,
                    ..cfg.extraction.surrogate.train.clone()
                },
                seed,
            );
            ec.query_batch = cfg.extraction.query_batch;
            let ex = extract(oracle.as_ref(), &data.pool, &ec)?;
            let dir = cli_dir(&cfg, seed);
            let ts = io::save_transferset(dir.join(format!("transferset-b{budget}")), &ex.transferset)?;
            let mut out = saved(&dir.join(format!("surrogate-b{budget}.xlab")), &ex.surrogate)?;
            out["transferset"] = json!(ts);
            out["queries_used"] = json!(ex.queries_used);
            out["test_acc"] = json!(evaluate_accuracy(&ex.surrogate, &data.test)?);
            let auditor = match (&victim, &checkpoint) {
                (Some(v), _) | (None, Some(v)) => Some(io::load_model(v)?),
                _ => None,
            };
            if let Some(v) = auditor {
                out["agreement"] = json!(agreement(&ex.surrogate, &v, data.test.inputs())?);
            }
            Ok(out)
        }
        Command::Serve {
            checkpoint,
            bind,
            budget,
            max_batch,
            log,
        } => {
            serve_blocking(&ServiceConfig {
                bind,
                checkpoint,
                budget,
                max_batch,
                log,
            })?;
            Ok(json!({ "stopped": true }))
        }
        Command::Evaluate { checkpoint, victim } => {
            let cfg = load_config(g)?;
            let seed = one_seed(g)?;
            let data = cfg.seed_data(seed)?;
            let model = io::load_model(checkpoint)?;
            let grid = adv_accuracy_grid(
                &model,
                &grid_subset(&cfg, &data.test)?,
                &cfg.metrics.techniques,
                &cfg.metrics.epsilons,
            )?;
            let mut out = json!({
                "test_acc": evaluate_accuracy(&model, &data.test)?,
                "adv_grid": grid,
            });
            if let Some(v) = victim {
                out["agreement"] = json!(agreement(&model, &io::load_model(v)?, data.test.inputs())?);
            }
            Ok(out)
        }
        Command::Run => {
            let mut cfg = load_config(g)?;
            if !g.seed.is_empty() {
                cfg.seeds = g.seed.clone();
            }
            let outcome = run_experiment(&cfg)?;
            Ok(json!({
                "dir": outcome.dir,
                "extraction_rows": outcome.extractions.len(),
                "stages_run": outcome.stages_run,
                "stages_skipped": outcome.stages_skipped,
            }))
        }
        Command::Trends => {
            let cfg = load_config(g)?;
            let verdict = run_trends(cfg.experiment_dir())?;
            eprintln!("{verdict}");
            if verdict.passed {
                Ok(serde_json::to_value(&verdict)?)
            } else {
                println!("{}", serde_json::to_string(&verdict)?);
                let failed = verdict
                    .checks
                    .iter()
                    .filter(|c| c.mandatory && !c.passed)
                    .map(|c| c.name.clone())
                    .collect();
                Err(XlabError::TrendsFailed(failed))
            }
        }
    }
}

fn fail(kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = fail("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
