//! Experiment configuration (TOML). Unknown keys are rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xlab_core::attack::{Technique, MAX_EPSILON};
use xlab_core::data::{LabeledDataset, Role};
use xlab_core::model::ModelSpec;
use xlab_core::synth::{synth_generate, SynthConfig};
use xlab_core::train::{mix_seed, TrainConfig};

use crate::error::{Result, XlabError};
use crate::io;

/// Where the three datasets of one seed come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum VictimData {
    /// Seed `s` draws class templates from `template_seed + s`.
    Synthetic {
        num_classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default = "default_side")]
        side: usize,
        #[serde(default = "default_channels")]
        channels: usize,
        #[serde(default = "default_noise")]
        noise: f32,
        #[serde(default = "default_cells")]
        cells: usize,
        #[serde(default = "default_contrast")]
        contrast: f32,
        #[serde(default = "default_victim_templates")]
        template_seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        num_classes: usize,
    },
}

/// Adversary pool: inputs only, drawn from a different distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PoolData {
    /// `templates × per_template` images from templates unrelated to the
    /// victim classes; geometry follows the victim data.
    Synthetic {
        #[serde(default = "default_pool_templates")]
        templates: usize,
        #[serde(default = "default_per_template")]
        per_template: usize,
        #[serde(default = "default_noise")]
        noise: f32,
        #[serde(default = "default_cells")]
        cells: usize,
        #[serde(default = "default_contrast")]
        contrast: f32,
        #[serde(default = "default_pool_template_seed")]
        template_seed: u64,
    },
    Idx { images: PathBuf },
}

fn default_side() -> usize {
    16
}
fn default_channels() -> usize {
    1
}
fn default_noise() -> f32 {
    0.3
}
fn default_cells() -> usize {
    4
}
fn default_contrast() -> f32 {
    0.8
}
fn default_victim_templates() -> u64 {
    1000
}
fn default_pool_templates() -> usize {
    500
}
fn default_per_template() -> usize {
    16
}
fn default_pool_template_seed() -> u64 {
    5000
}

/// An architecture (preset name or layer chain) with its training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `cnn-small`, `mlp-wide`, or a chain such as `flatten dense(64) relu dense(10)`.
    pub architecture: String,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialMatrix {
    pub techniques: Vec<Technique>,
    pub epsilons: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionMatrix {
    /// Ascending query budgets.
    pub budgets: Vec<usize>,
    pub surrogate: ModelConfig,
    #[serde(default = "default_query_batch")]
    pub query_batch: usize,
    /// Keep every transfer set on disk next to its surrogate.
    #[serde(default)]
    pub save_transfersets: bool,
}

fn default_query_batch() -> usize {
    xlab_core::extraction::DEFAULT_QUERY_BATCH
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub techniques: Vec<Technique>,
    pub epsilons: Vec<f32>,
    /// Adversarial grids use the first `grid_samples` test images (the test
    /// set is class-interleaved, so any prefix stays balanced). All of it
    /// when absent.
    #[serde(default)]
    pub grid_samples: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleMode {
    /// Victims answer in process.
    #[default]
    Local,
    /// Each victim is deployed behind a loopback HTTP service.
    Service,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub oracle: OracleMode,
    pub victim_data: VictimData,
    pub pool: PoolData,
    pub victim: ModelConfig,
    pub adversarial: AdversarialMatrix,
    pub extraction: ExtractionMatrix,
    pub metrics: MetricsConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Datasets of one seed.
pub struct SeedData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub pool: LabeledDataset,
}

/// Checked-in default desk configuration.
pub const DESK_TOML: &str = include_str!("../../../configs/desk.toml");

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| XlabError::ConfigSyntax(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = io::read(path.as_ref())?;
        let text = String::from_utf8(bytes)
            .map_err(|_| XlabError::ConfigSyntax(format!("{} is not UTF-8", path.as_ref().display())))?;
        Self::from_toml(&text)
    }

    pub fn desk() -> Self {
        Self::from_toml(DESK_TOML).expect("checked-in desk config is valid")
    }

    /// `out_dir/id`.
    pub fn experiment_dir(&self) -> PathBuf {
        self.out_dir.join(&self.id)
    }

    pub fn victim_spec(&self) -> Result<ModelSpec> {
        let (shape, k) = self.input_geometry();
        resolve_architecture(&self.victim.architecture, "victim-model", shape, k)
            .map_err(|e| XlabError::config("victim.architecture", e.to_string()))
    }

    pub fn surrogate_spec(&self) -> Result<ModelSpec> {
        let (shape, k) = self.input_geometry();
        resolve_architecture(&self.extraction.surrogate.architecture, "surrogate-model", shape, k)
            .map_err(|e| XlabError::config("extraction.surrogate.architecture", e.to_string()))
    }

    /// Input shape and class count. For IDX data the images are read lazily,
    /// so the shape is only known after loading; 28×28 is assumed here and
    /// checked once the data is loaded.
    pub fn input_geometry(&self) -> ([usize; 3], usize) {
        match &self.victim_data {
            VictimData::Synthetic {
                num_classes,
                side,
                channels,
                ..
            } => ([*channels, *side, *side], *num_classes),
            VictimData::Idx { num_classes, .. } => ([1, 28, 28], *num_classes),
        }
    }

    /// Content hash of everything that determines stage results for a seed.
    /// The seed list, output directory and oracle transport are excluded.
    pub fn content_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.seeds.clear();
        canonical.out_dir = PathBuf::new();
        canonical.oracle = OracleMode::Local;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        io::sha256_hex(json.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty()
            || !self
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(XlabError::config("id", "must be non-empty [A-Za-z0-9_-]"));
        }
        if self.seeds.is_empty() {
            return Err(XlabError::config("seeds", "at least one seed is required"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(XlabError::config("seeds", "seeds must be distinct"));
        }
        match &self.victim_data {
            VictimData::Synthetic {
                num_classes,
                train_per_class,
                test_per_class,
                ..
            } => {
                if *train_per_class == 0 || *test_per_class == 0 {
                    return Err(XlabError::config(
                        "victim_data",
                        "train_per_class and test_per_class must be positive",
                    ));
                }
                self.synth_victim(0, "train", 1, Role::VictimTrain)
                    .validate()
                    .map_err(|e| XlabError::config("victim_data", e.to_string()))?;
                if *num_classes < 2 {
                    return Err(XlabError::config("victim_data.num_classes", "must be >= 2"));
                }
            }
            VictimData::Idx { num_classes, .. } => {
                if *num_classes < 2 {
                    return Err(XlabError::config("victim_data.num_classes", "must be >= 2"));
                }
            }
        }
        if let Some(pool) = self.synth_pool(0) {
            pool.validate()
                .map_err(|e| XlabError::config("pool", e.to_string()))?;
        }
        self.victim_spec()?;
        self.surrogate_spec()?;
        self.victim
            .train
            .validate()
            .map_err(|e| XlabError::config("victim.train", e.to_string()))?;
        self.extraction
            .surrogate
            .train
            .validate()
            .map_err(|e| XlabError::config("extraction.surrogate.train", e.to_string()))?;
        check_epsilons("adversarial.epsilons", &self.adversarial.epsilons)?;
        check_epsilons("metrics.epsilons", &self.metrics.epsilons)?;
        if self.adversarial.techniques.is_empty() != self.adversarial.epsilons.is_empty() {
            return Err(XlabError::config(
                "adversarial",
                "techniques and epsilons must both be empty or both be non-empty",
            ));
        }
        if self.metrics.techniques.is_empty() || self.metrics.epsilons.is_empty() {
            return Err(XlabError::config("metrics", "techniques and epsilons must be non-empty"));
        }
        let b = &self.extraction.budgets;
        if b.is_empty() {
            return Err(XlabError::config("extraction.budgets", "at least one budget is required"));
        }
        if b[0] == 0 {
            return Err(XlabError::config("extraction.budgets", "budgets must be >= 1"));
        }
        if b.windows(2).any(|w| w[0] >= w[1]) {
            return Err(XlabError::config("extraction.budgets", "budgets must be strictly ascending"));
        }
        if let Some(n) = self.pool_size() {
            if *b.last().unwrap() > n {
                return Err(XlabError::config(
                    "extraction.budgets",
                    format!("largest budget {} exceeds the pool size {n}", b.last().unwrap()),
                ));
            }
        }
        if self.extraction.query_batch == 0 {
            return Err(XlabError::config("extraction.query_batch", "must be >= 1"));
        }
        if self.metrics.grid_samples == Some(0) {
            return Err(XlabError::config("metrics.grid_samples", "must be >= 1"));
        }
        Ok(())
    }

    fn pool_size(&self) -> Option<usize> {
        match &self.pool {
            PoolData::Synthetic {
                templates,
                per_template,
                ..
            } => Some(templates * per_template),
            PoolData::Idx { .. } => None,
        }
    }

    fn synth_victim(&self, seed: u64, split: &str, stream: u64, _role: Role) -> SynthConfig {
        match &self.victim_data {
            VictimData::Synthetic {
                num_classes,
                train_per_class,
                test_per_class,
                side,
                channels,
                noise,
                cells,
                contrast,
                template_seed,
            } => SynthConfig {
                name: format!("{}-{split}", self.id),
                num_classes: *num_classes,
                samples_per_class: if split == "train" {
                    *train_per_class
                } else {
                    *test_per_class
                },
                side: *side,
                channels: *channels,
                template_seed: template_seed.wrapping_add(seed),
                sample_seed: mix_seed(seed, stream, 0),
                noise: *noise,
                cells: *cells,
                contrast: *contrast,
            },
            VictimData::Idx { .. } => unreachable!("synthetic victim data only"),
        }
    }

    fn synth_pool(&self, seed: u64) -> Option<SynthConfig> {
        let (shape, _) = self.input_geometry();
        match &self.pool {
            PoolData::Synthetic {
                templates,
                per_template,
                noise,
                cells,
                contrast,
                template_seed,
            } => Some(SynthConfig {
                name: format!("{}-pool", self.id),
                num_classes: *templates,
                samples_per_class: *per_template,
                side: shape[1],
                channels: shape[0],
                template_seed: template_seed.wrapping_add(seed),
                sample_seed: mix_seed(seed, 3, 0),
                noise: *noise,
                cells: *cells,
                contrast: *contrast,
            }),
            PoolData::Idx { .. } => None,
        }
    }

    /// Victim train/test sets and the adversary pool for `seed`.
    pub fn seed_data(&self, seed: u64) -> Result<SeedData> {
        let (train, test) = match &self.victim_data {
            VictimData::Synthetic { .. } => (
                synth_generate(&self.synth_victim(seed, "train", 1, Role::VictimTrain), Role::VictimTrain)?,
                synth_generate(&self.synth_victim(seed, "test", 2, Role::HeldoutTest), Role::HeldoutTest)?,
            ),
            VictimData::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                num_classes,
            } => (
                io::load_idx_dataset(train_images, train_labels, &format!("{}-train", self.id), Role::VictimTrain, *num_classes)?,
                io::load_idx_dataset(test_images, test_labels, &format!("{}-test", self.id), Role::HeldoutTest, *num_classes)?,
            ),
        };
        let pool = match &self.pool {
            PoolData::Synthetic { .. } => {
                synth_generate(&self.synth_pool(seed).expect("synthetic pool"), Role::AdversaryPool)?
            }
            PoolData::Idx { images } => io::load_idx_pool(images, &format!("{}-pool", self.id))?,
        };
        if pool.sample_shape() != train.sample_shape() || test.sample_shape() != train.sample_shape() {
            return Err(XlabError::config(
                "pool",
                format!(
                    "sample shapes differ: train {:?}, test {:?}, pool {:?}",
                    train.sample_shape(),
                    test.sample_shape(),
                    pool.sample_shape()
                ),
            ));
        }
        if let Some(&b) = self.extraction.budgets.last() {
            if b > pool.len() {
                return Err(XlabError::config(
                    "extraction.budgets",
                    format!("largest budget {b} exceeds the pool size {}", pool.len()),
                ));
            }
        }
        Ok(SeedData { train, test, pool })
    }
}

fn check_epsilons(field: &str, eps: &[f32]) -> Result<()> {
    for &e in eps {
        if !(e > 0.0 && e <= MAX_EPSILON) {
            return Err(XlabError::config(field, format!("epsilon {e} outside (0, {MAX_EPSILON}]")));
        }
    }
    if eps.iter().enumerate().any(|(i, a)| eps[..i].contains(a)) {
        return Err(XlabError::config(field, "epsilons must be distinct"));
    }
    Ok(())
}

/// A preset name or a layer chain.
pub fn resolve_architecture(
    text: &str,
    name: &str,
    input_shape: [usize; 3],
    num_classes: usize,
) -> xlab_core::Result<ModelSpec> {
    match ModelSpec::preset(text, input_shape, num_classes) {
        Some(spec) => Ok(spec),
        None => ModelSpec::from_layers(name, input_shape, text, num_classes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_parses_and_validates() {
        let cfg = ExperimentConfig::desk();
        assert_eq!(cfg.seeds.len(), 3);
        assert_eq!(cfg.extraction.budgets, vec![250, 500, 1000, 2000, 4000]);
        assert_eq!(cfg.metrics.epsilons.len(), 8);
        assert_eq!(cfg.victim_spec().unwrap().name, "cnn-small");
        assert_eq!(cfg.surrogate_spec().unwrap().name, "mlp-wide");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = DESK_TOML.replace("seeds = [", "colour = 1\nseeds = [");
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap_err().kind(), "invalid_config");
        let text = DESK_TOML.replace("noise = 0.3", "noise = 0.3\nsparkle = true");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = ExperimentConfig::desk();
        cfg.extraction.budgets = vec![500, 250];
        match cfg.validate().unwrap_err() {
            XlabError::Config { field, .. } => assert_eq!(field, "extraction.budgets"),
            e => panic!("{e}"),
        }
        let mut cfg = ExperimentConfig::desk();
        cfg.adversarial.epsilons = vec![0.0];
        match cfg.validate().unwrap_err() {
            XlabError::Config { field, .. } => assert_eq!(field, "adversarial.epsilons"),
            e => panic!("{e}"),
        }
        let mut cfg = ExperimentConfig::desk();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::desk();
        cfg.extraction.budgets = vec![250, 9000];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn content_hash_ignores_seeds_and_paths() {
        let a = ExperimentConfig::desk();
        let mut b = a.clone();
        b.seeds = vec![9];
        b.out_dir = PathBuf::from("/elsewhere");
        b.oracle = OracleMode::Service;
        assert_eq!(a.content_hash(), b.content_hash());
        b.extraction.budgets.push(5000);
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn seed_data_roles_and_sizes() {
        let mut cfg = ExperimentConfig::desk();
        if let VictimData::Synthetic {
            train_per_class,
            test_per_class,
            ..
        } = &mut cfg.victim_data
        {
            *train_per_class = 3;
            *test_per_class = 2;
        }
        let d = cfg.seed_data(1).unwrap();
        assert_eq!((d.train.len(), d.test.len(), d.pool.len()), (30, 20, 8000));
        assert_eq!(d.test.role, Role::HeldoutTest);
        assert_eq!(d.pool.role, Role::AdversaryPool);
        let again = cfg.seed_data(1).unwrap();
        assert_eq!(d.train, again.train);
        assert_ne!(d.train.inputs(), cfg.seed_data(2).unwrap().train.inputs());
    }
}
