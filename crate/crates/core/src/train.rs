//! Mini-batch SGD with momentum and a step-decay learning-rate schedule.
//!
//! Hard labels are expanded to one-hot rows so natural training and
//! soft-label surrogate training share the same cross-entropy path.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::data::{one_hot, permutation, LabeledDataset, Role};
use crate::error::{Error, Result};
use crate::extraction::TransferSet;
use crate::graph::Bindings;
use crate::model::{argmax_rows, GraphOptions, Model, INPUT_LEAF, TARGET_LEAF};

/// Whether training targets come from integer labels or probability vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum LabelMode {
    Hard,
    Soft,
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelMode::Hard => "hard",
            LabelMode::Soft => "soft",
        })
    }
}

impl FromStr for LabelMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(LabelMode::Hard),
            "soft" => Ok(LabelMode::Soft),
            other => Err(Error::InvalidConfig(format!("unknown label mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub initial_lr: f32,
    pub decay_factor: f32,
    /// Epochs between learning-rate decays.
    pub decay_every: u32,
    pub max_epochs: u32,
    pub batch_size: usize,
    pub momentum: f32,
    pub seed: u64,
    pub label_mode: LabelMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.01,
            decay_factor: 0.1,
            decay_every: 15,
            max_epochs: 30,
            batch_size: 64,
            momentum: 0.9,
            seed: 0,
            label_mode: LabelMode::Hard,
        }
    }
}

impl TrainConfig {
    /// Schedule of the full-scale runs: 200 epochs, decay by 10 every 60.
    pub fn paper_scale() -> Self {
        Self {
            decay_every: 60,
            max_epochs: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidConfig(m));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr must be > 0, got {}", self.initial_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor must be in (0, 1], got {}", self.decay_factor));
        }
        if self.decay_every == 0 {
            return bad("decay_every must be >= 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }
}

/// `initial_lr · decay_factor^floor(epoch / decay_every)`.
pub fn lr_at(config: &TrainConfig, epoch: u32) -> f32 {
    let steps = epoch / config.decay_every.max(1);
    (config.initial_lr as f64 * libm::pow(config.decay_factor as f64, steps as f64)) as f32
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: u32,
    pub lr: f32,
    pub mean_loss: f64,
    /// Agreement of training-mode argmax with the target argmax.
    pub train_accuracy: f64,
    pub heldout_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// What a training run consumes.
#[derive(Clone, Copy, Debug)]
pub enum TrainData<'a> {
    Labeled(&'a LabeledDataset),
    Transfer(&'a TransferSet),
}

impl<'a> From<&'a LabeledDataset> for TrainData<'a> {
    fn from(d: &'a LabeledDataset) -> Self {
        TrainData::Labeled(d)
    }
}

impl<'a> From<&'a TransferSet> for TrainData<'a> {
    fn from(t: &'a TransferSet) -> Self {
        TrainData::Transfer(t)
    }
}

/// SplitMix64 finalizer used to derive independent seeds.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains `model` in place semantics and returns it with its history.
pub fn train<'a>(
    model: Model,
    data: impl Into<TrainData<'a>>,
    config: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    train_monitored(model, data, config, None)
}

/// As [`train`], additionally scoring `heldout` after every epoch.
pub fn train_monitored<'a>(
    mut model: Model,
    data: impl Into<TrainData<'a>>,
    config: &TrainConfig,
    heldout: Option<&LabeledDataset>,
) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    let data = data.into();
    let k = model.num_classes();
    let (inputs, targets, name) = match (config.label_mode, data) {
        (LabelMode::Hard, TrainData::Labeled(d)) => {
            if d.role == Role::HeldoutTest {
                return Err(Error::RoleViolation(format!(
                    "dataset `{}` is a heldout test set and cannot be trained on",
                    d.name
                )));
            }
            if d.num_classes() != k {
                return Err(Error::InvalidConfig(format!(
                    "dataset has {} classes, model has {k}",
                    d.num_classes()
                )));
            }
            (d.inputs(), one_hot(d.labels(), k)?, d.name.clone())
        }
        (LabelMode::Soft, TrainData::Transfer(t)) => {
            if t.soft_labels().shape()[1] != k {
                return Err(Error::ShapeMismatch {
                    node: "soft labels".into(),
                    expected: vec![t.len(), k],
                    got: t.soft_labels().shape().to_vec(),
                });
            }
            (t.inputs(), t.soft_labels().clone(), format!("transferset:{}", t.provenance.pool_id))
        }
        (LabelMode::Hard, TrainData::Transfer(_)) => {
            return Err(Error::InvalidConfig("hard label mode needs a labeled dataset".into()))
        }
        (LabelMode::Soft, TrainData::Labeled(_)) => {
            return Err(Error::InvalidConfig("soft label mode needs a transfer set".into()))
        }
    };
    let n = inputs.shape()[0];
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let target_argmax = argmax_rows(&targets);
    let mut velocity: Vec<Vec<f32>> = model
        .params()
        .iter()
        .map(|(_, t)| vec![0.0; t.len()])
        .collect();
    let mut history = TrainHistory::default();

    for epoch in 0..config.max_epochs {
        let lr = lr_at(config, epoch);
        let order = permutation(n, Some(mix_seed(config.seed, 1, epoch as u64)));
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let x = inputs.gather_rows(idx)?;
            let t = targets.gather_rows(idx)?;
            let mut mg = model.graph(
                idx.len(),
                GraphOptions {
                    train: true,
                    dropout_seed: mix_seed(config.seed, 2 + epoch as u64, bi as u64),
                    param_grads: true,
                    input_grad: false,
                    with_loss: true,
                },
            )?;
            let loss_node = mg.loss.expect("graph built with a loss");
            let grads = {
                let mut b = Bindings::new();
                model.bind(&mut b);
                b.bind(INPUT_LEAF, &x);
                b.bind(TARGET_LEAF, &t);
                let loss = mg.graph.forward(&b, loss_node)?;
                let lv = loss.data()[0];
                if !lv.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch: epoch as usize,
                    });
                }
                loss_sum += lv as f64 * idx.len() as f64;
                let logits = mg.graph.value(mg.logits).expect("logits evaluated");
                for (r, pred) in argmax_rows(&logits).into_iter().enumerate() {
                    if pred == target_argmax[idx[r]] {
                        correct += 1;
                    }
                }
                mg.graph.backward(loss_node)?
            };
            let mu = config.momentum;
            for ((name, p), v) in model.params_mut().iter_mut().zip(velocity.iter_mut()) {
                let g = grads
                    .get(name.as_str())
                    .ok_or_else(|| Error::MissingParameter(name.clone()))?;
                for ((w, vel), &gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                    *vel = mu * *vel + gv;
                    *w -= lr * *vel;
                }
            }
        }
        let heldout_accuracy = match heldout {
            Some(h) => Some(evaluate_accuracy(&model, h)?),
            None => None,
        };
        history.records.push(EpochRecord {
            epoch,
            lr,
            mean_loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
            heldout_accuracy,
        });
    }
    model.meta.epochs = config.max_epochs;
    model.meta.final_lr = lr_at(config, config.max_epochs - 1);
    model.meta.dataset = name;
    Ok((model, history))
}

/// Fraction of samples whose predicted label equals the true label.
pub fn evaluate_accuracy(model: &Model, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pred = model.predict_label(dataset.inputs())?;
    Ok(crate::metrics::accuracy(&pred, dataset.labels())?)
}
