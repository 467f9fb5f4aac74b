//! Labeled image datasets and deterministic batching.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::AdvTag;
use crate::tensor::Tensor;

/// What a dataset may be used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    VictimTrain,
    AdversaryPool,
    HeldoutTest,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::VictimTrain => "victim-train",
            Role::AdversaryPool => "adversary-pool",
            Role::HeldoutTest => "heldout-test",
        })
    }
}

impl FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "victim-train" => Ok(Role::VictimTrain),
            "adversary-pool" => Ok(Role::AdversaryPool),
            "heldout-test" => Ok(Role::HeldoutTest),
            other => Err(Error::InvalidConfig(format!("unknown dataset role `{other}`"))),
        }
    }
}

/// Images in `[0, 1]` with hard integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub role: Role,
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    /// Set when the inputs are adversarial copies of another dataset.
    pub attack: Option<AdvTag>,
}

impl LabeledDataset {
    /// Validates `N×C×H×W` inputs in `[0, 1]` and labels below `num_classes`.
    pub fn new(
        name: impl Into<String>,
        role: Role,
        inputs: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let name = name.into();
        if inputs.shape().len() != 4 {
            return Err(Error::ShapeMismatch {
                node: "dataset inputs".into(),
                expected: alloc::vec![labels.len(), 0, 0, 0],
                got: inputs.shape().to_vec(),
            });
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::LengthMismatch {
                left: inputs.shape()[0],
                right: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        if inputs.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig(format!(
                "dataset `{name}` has inputs outside [0, 1]"
            )));
        }
        Ok(Self {
            name,
            role,
            inputs,
            labels,
            num_classes,
            attack: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.inputs.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = alloc::vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Subset in the given index order (same role and name suffix).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let inputs = self.inputs.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Self {
            name: self.name.clone(),
            role: self.role,
            inputs,
            labels,
            num_classes: self.num_classes,
            attack: self.attack,
        })
    }

    /// Appends another dataset with matching geometry and class count.
    pub fn concat(&self, other: &Self, name: impl Into<String>) -> Result<Self> {
        if other.num_classes != self.num_classes {
            return Err(Error::InvalidConfig("class counts differ".into()));
        }
        let inputs = Tensor::concat_rows(&[&self.inputs, &other.inputs])?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Self {
            name: name.into(),
            role: self.role,
            inputs,
            labels,
            num_classes: self.num_classes,
            attack: None,
        })
    }

    /// Deterministic mini-batches; `None` keeps the stored order.
    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Batches<'_> {
        Batches {
            dataset: self,
            order: permutation(self.len(), shuffle_seed),
            batch_size: batch_size.max(1),
            pos: 0,
        }
    }
}

/// `0..n`, shuffled when a seed is given.
pub fn permutation(n: usize, seed: Option<u64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

/// Iterator over `(inputs, labels)` mini-batches; the last may be short.
pub struct Batches<'a> {
    dataset: &'a LabeledDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let inputs = self
            .dataset
            .inputs
            .gather_rows(idx)
            .expect("indices come from a permutation of the dataset");
        let labels = idx.iter().map(|&i| self.dataset.labels[i]).collect();
        Some((inputs, labels))
    }
}

/// One-hot `B×K` rows for hard labels.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut data = alloc::vec![0.0f32; labels.len() * num_classes];
    for (r, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: l,
                num_classes,
            });
        }
        data[r * num_classes + l] = 1.0;
    }
    Tensor::new([labels.len(), num_classes], data)
}
