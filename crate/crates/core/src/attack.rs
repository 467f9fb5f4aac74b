//! L∞ evasion attacks (FGSM, PGD) and static adversarial-training augmentation.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{one_hot, LabeledDataset, Role};
use crate::error::{Error, Result};
use crate::graph::Bindings;
use crate::model::{AdvTag, GraphOptions, Model, ModelSpec, INPUT_LEAF, TARGET_LEAF};
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig};

/// Largest supported perturbation radius.
pub const MAX_EPSILON: f32 = 0.5;
/// Inputs and adversarial outputs live in this range.
pub const CLAMP_RANGE: (f32, f32) = (0.0, 1.0);
/// Rows per forward/backward pass while computing input gradients.
const GRAD_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Technique {
    Fgsm,
    Pgd,
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Technique::Fgsm => "fgsm",
            Technique::Pgd => "pgd",
        })
    }
}

impl FromStr for Technique {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(Technique::Fgsm),
            "pgd" => Ok(Technique::Pgd),
            other => Err(Error::InvalidConfig(format!("unknown attack technique `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct AttackConfig {
    pub technique: Technique,
    /// L∞ radius in input units.
    pub epsilon: f32,
    /// PGD iterations `T`.
    pub steps: u32,
    /// PGD step size `α`.
    pub step_size: f32,
    /// PGD: start from a uniform point of the ε-ball drawn from `seed`.
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f32) -> Self {
        Self {
            technique: Technique::Fgsm,
            epsilon,
            steps: 1,
            step_size: epsilon,
            random_start: false,
            seed: 0,
        }
    }

    /// PGD with the default step size `α = 2.5·ε / T`.
    pub fn pgd(epsilon: f32, steps: u32) -> Self {
        Self {
            technique: Technique::Pgd,
            epsilon,
            steps,
            step_size: 2.5 * epsilon / steps.max(1) as f32,
            random_start: false,
            seed: 0,
        }
    }

    /// PGD stepping by the full radius each iteration (`α = ε`).
    pub fn pgd_full_step(epsilon: f32, steps: u32) -> Self {
        Self {
            step_size: epsilon,
            ..Self::pgd(epsilon, steps)
        }
    }

    /// Preset for a technique name at a radius (PGD uses 10 steps).
    pub fn preset(technique: Technique, epsilon: f32) -> Self {
        match technique {
            Technique::Fgsm => Self::fgsm(epsilon),
            Technique::Pgd => Self::pgd(epsilon, 10),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= MAX_EPSILON) {
            return Err(Error::EpsilonOutOfRange(self.epsilon));
        }
        if self.technique == Technique::Pgd {
            if self.steps == 0 {
                return Err(Error::InvalidConfig("pgd needs at least one step".into()));
            }
            if !(self.step_size > 0.0 && self.step_size.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "pgd step size must be > 0, got {}",
                    self.step_size
                )));
            }
        }
        Ok(())
    }
}

fn check_epsilon(epsilon: f32) -> Result<()> {
    if (0.0..=MAX_EPSILON).contains(&epsilon) {
        Ok(())
    } else {
        Err(Error::EpsilonOutOfRange(epsilon))
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the summed per-example cross-entropy loss with respect to the
/// inputs, with the model in evaluation mode.
pub fn input_gradient(model: &Model, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let n = x.shape().first().copied().unwrap_or(0);
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            left: n,
            right: labels.len(),
        });
    }
    let k = model.num_classes();
    let mut out = Vec::with_capacity(x.len());
    let mut start = 0;
    while start < n {
        let end = (start + GRAD_CHUNK).min(n);
        let rows = end - start;
        let xb = x.slice_rows(start, end)?;
        let tb = one_hot(&labels[start..end], k)?;
        let mut mg = model.graph(
            rows,
            GraphOptions {
                input_grad: true,
                with_loss: true,
                ..GraphOptions::default()
            },
        )?;
        let loss = mg.loss.expect("graph built with a loss");
        let mut b = Bindings::new();
        model.bind(&mut b);
        b.bind(INPUT_LEAF, &xb);
        b.bind(TARGET_LEAF, &tb);
        mg.graph.forward(&b, loss)?;
        let mut grads = mg.graph.backward(loss)?;
        let g = grads
            .remove(INPUT_LEAF)
            .ok_or_else(|| Error::MissingParameter(INPUT_LEAF.into()))?;
        out.extend(g.data().iter().map(|&v| v * rows as f32));
        start = end;
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn check_inputs(x: &Tensor) -> Result<()> {
    let (lo, hi) = CLAMP_RANGE;
    if x.data().iter().all(|v| (lo..=hi).contains(v)) {
        Ok(())
    } else {
        Err(Error::InvalidConfig("attack inputs must lie in [0, 1]".into()))
    }
}

/// Fast gradient sign method: `clamp(x + ε·sign(∇ₓL), 0, 1)`.
pub fn fgsm(model: &Model, x: &Tensor, labels: &[usize], epsilon: f32) -> Result<Tensor> {
    check_epsilon(epsilon)?;
    check_inputs(x)?;
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let g = input_gradient(model, x, labels)?;
    let (lo, hi) = CLAMP_RANGE;
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&xv, &gv)| (xv + epsilon * sign(gv)).clamp(lo, hi))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Projected gradient descent on the L∞ ball of radius ε intersected with `[0, 1]`.
pub fn pgd(model: &Model, x: &Tensor, labels: &[usize], config: &AttackConfig) -> Result<Tensor> {
    config.validate()?;
    if config.technique != Technique::Pgd {
        return Err(Error::InvalidConfig("pgd called with a non-pgd config".into()));
    }
    check_inputs(x)?;
    let eps = config.epsilon;
    let (lo, hi) = CLAMP_RANGE;
    let project = |orig: f32, cand: f32| cand.max(orig - eps).min(orig + eps).clamp(lo, hi);
    let mut cur = x.clone();
    if config.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for (c, &o) in cur.data_mut().iter_mut().zip(x.data()) {
            *c = project(o, o + rng.gen_range(-eps..=eps));
        }
    }
    for _ in 0..config.steps {
        let g = input_gradient(model, &cur, labels)?;
        for ((c, &o), &gv) in cur.data_mut().iter_mut().zip(x.data()).zip(g.data()) {
            *c = project(o, *c + config.step_size * sign(gv));
        }
    }
    Ok(cur)
}

/// Dispatches on `config.technique`.
pub fn attack(model: &Model, x: &Tensor, labels: &[usize], config: &AttackConfig) -> Result<Tensor> {
    config.validate()?;
    match config.technique {
        Technique::Fgsm => fgsm(model, x, labels, config.epsilon),
        Technique::Pgd => pgd(model, x, labels, config),
    }
}

/// One adversarial copy of every sample, labels kept, tagged with the attack.
pub fn craft_adversarial_set(
    model: &Model,
    dataset: &LabeledDataset,
    config: &AttackConfig,
) -> Result<LabeledDataset> {
    if dataset.role == Role::AdversaryPool {
        return Err(Error::RoleViolation(format!(
            "adversarial sets are crafted from labeled victim or test data, `{}` is an adversary pool",
            dataset.name
        )));
    }
    let x = attack(model, dataset.inputs(), dataset.labels(), config)?;
    let mut out = LabeledDataset::new(
        format!("{}+{}@{}", dataset.name, config.technique, config.epsilon),
        dataset.role,
        x,
        dataset.labels().to_vec(),
        dataset.num_classes(),
    )?;
    out.attack = Some(AdvTag {
        technique: config.technique,
        epsilon: config.epsilon,
    });
    Ok(out)
}

/// Adversarial-training settings: the attack used to craft the appended copies.
/// Copies are appended to the originals and carry the originals' labels.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdvTrainConfig {
    pub attack: AttackConfig,
}

/// Originals followed by their adversarial copies crafted against `natural`.
pub fn augment(natural: &Model, dataset: &LabeledDataset, adv: &AdvTrainConfig) -> Result<LabeledDataset> {
    let crafted = craft_adversarial_set(natural, dataset, &adv.attack)?;
    let name = format!("{}+adv", dataset.name);
    dataset.concat(&crafted, name)
}

/// Crafts against an already trained natural model, then trains a fresh model
/// (same spec, initialized from `train_config.seed`) on the doubled set.
pub fn adversarial_retrain(
    natural: &Model,
    dataset: &LabeledDataset,
    adv: &AdvTrainConfig,
    train_config: &TrainConfig,
) -> Result<Model> {
    adv.attack.validate()?;
    let augmented = augment(natural, dataset, adv)?;
    let fresh = Model::build(natural.spec.clone(), train_config.seed)?;
    let (mut model, _) = train(fresh, &augmented, train_config)?;
    model.meta.adversarial = Some(AdvTag {
        technique: adv.attack.technique,
        epsilon: adv.attack.epsilon,
    });
    Ok(model)
}

/// Full pipeline: train a natural model, craft against it, retrain from scratch.
pub fn adversarial_train(
    spec: &ModelSpec,
    dataset: &LabeledDataset,
    adv: &AdvTrainConfig,
    train_config: &TrainConfig,
) -> Result<Model> {
    adv.attack.validate()?;
    let fresh = Model::build(spec.clone(), train_config.seed)?;
    let (natural, _) = train(fresh, dataset, train_config)?;
    adversarial_retrain(&natural, dataset, adv, train_config)
}
