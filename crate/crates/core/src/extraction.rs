//! Black-box model extraction: query an oracle with adversary-pool inputs,
//! keep its probability vectors as soft labels, train a surrogate on them.
//!
//! Nothing here touches the victim except through [`Oracle`].

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::data::{permutation, LabeledDataset, Role};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::tensor::Tensor;
use crate::train::{train, LabelMode, TrainConfig};

/// Tolerance on the row sums of probability vectors.
pub const ROW_SUM_TOL: f64 = 1e-5;
/// Default number of samples per oracle request.
pub const DEFAULT_QUERY_BATCH: usize = 64;

/// Query access to a deployed classifier.
///
/// Implementations must be safe to share across threads and must never
/// answer more samples than their budget allows, even under concurrency.
pub trait Oracle: Send + Sync {
    /// Opaque identifier recorded in transfer-set provenance.
    fn id(&self) -> String;
    fn num_classes(&self) -> usize;
    /// Probability rows for a `B×C×H×W` batch.
    fn query(&self, batch: &Tensor) -> Result<Tensor>;
    /// Samples answered so far.
    fn queries_used(&self) -> usize;
    /// `None` when unlimited.
    fn budget_remaining(&self) -> Option<usize>;
}

/// Atomic sample budget shared by oracle implementations.
#[derive(Debug)]
pub struct Budget {
    limit: Option<usize>,
    used: AtomicUsize,
}

impl Budget {
    pub fn new(limit: Option<usize>) -> Self {
        Self {
            limit,
            used: AtomicUsize::new(0),
        }
    }

    pub fn limit(&self) -> Option<usize> {
        self.limit
    }

    pub fn used(&self) -> usize {
        self.used.load(Ordering::SeqCst)
    }

    pub fn remaining(&self) -> Option<usize> {
        self.limit.map(|l| l.saturating_sub(self.used()))
    }

    /// Reserves `n` samples or fails without consuming anything.
    pub fn reserve(&self, n: usize) -> Result<()> {
        let mut cur = self.used.load(Ordering::SeqCst);
        loop {
            let next = cur + n;
            if let Some(limit) = self.limit {
                if next > limit {
                    return Err(Error::BudgetExhausted { used: cur });
                }
            }
            match self
                .used
                .compare_exchange(cur, next, Ordering::SeqCst, Ordering::SeqCst)
            {
                Ok(_) => return Ok(()),
                Err(actual) => cur = actual,
            }
        }
    }

    /// Returns a reservation whose request failed before being answered.
    pub fn release(&self, n: usize) {
        self.used.fetch_sub(n, Ordering::SeqCst);
    }
}

/// An in-process oracle around a victim model.
#[derive(Debug)]
pub struct LocalOracle {
    model: Model,
    id: String,
    budget: Budget,
    max_batch: Option<usize>,
}

impl LocalOracle {
    pub fn new(model: Model, id: impl Into<String>) -> Self {
        Self {
            model,
            id: id.into(),
            budget: Budget::new(None),
            max_batch: None,
        }
    }

    pub fn with_budget(mut self, budget: usize) -> Self {
        self.budget = Budget::new(Some(budget));
        self
    }

    pub fn with_max_batch(mut self, max: usize) -> Self {
        self.max_batch = Some(max);
        self
    }

    /// Auditor access; the attacker only sees the [`Oracle`] trait.
    pub fn model(&self) -> &Model {
        &self.model
    }
}

impl Oracle for LocalOracle {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn query(&self, batch: &Tensor) -> Result<Tensor> {
        let n = batch.shape().first().copied().unwrap_or(0);
        if let Some(max) = self.max_batch {
            if n > max {
                return Err(Error::BatchTooLarge { size: n, max });
            }
        }
        self.budget.reserve(n)?;
        self.model.predict_proba(batch).inspect_err(|_| self.budget.release(n))
    }

    fn queries_used(&self) -> usize {
        self.budget.used()
    }

    fn budget_remaining(&self) -> Option<usize> {
        self.budget.remaining()
    }
}

/// Where a transfer set came from.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Provenance {
    pub oracle_id: String,
    pub pool_id: String,
    pub seed: u64,
    pub budget: usize,
}

/// Adversary inputs paired with the oracle's probability vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferSet {
    inputs: Tensor,
    soft_labels: Tensor,
    pub provenance: Provenance,
}

/// Checks that every row of a `B×K` tensor is a probability vector.
pub fn check_probability_rows(t: &Tensor) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::MalformedResponse(format!(
            "expected a B×K matrix, got shape {:?}",
            t.shape()
        )));
    }
    let k = t.shape()[1];
    for (row, r) in t.data().chunks_exact(k).enumerate() {
        let sum: f64 = r.iter().map(|&v| v as f64).sum();
        if r.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::RowNotNormalized { row, sum });
        }
    }
    Ok(())
}

impl TransferSet {
    pub fn new(inputs: Tensor, soft_labels: Tensor, provenance: Provenance) -> Result<Self> {
        check_probability_rows(&soft_labels)?;
        let n = inputs.shape().first().copied().unwrap_or(0);
        if inputs.shape().len() != 4 || n != soft_labels.shape()[0] {
            return Err(Error::LengthMismatch {
                left: n,
                right: soft_labels.shape()[0],
            });
        }
        Ok(Self {
            inputs,
            soft_labels,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.soft_labels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn soft_labels(&self) -> &Tensor {
        &self.soft_labels
    }

    pub fn num_classes(&self) -> usize {
        self.soft_labels.shape()[1]
    }
}

/// One extraction attack: budget, surrogate family and how to train it.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractionConfig {
    /// Samples to query (`q`).
    pub budget: usize,
    pub surrogate_spec: ModelSpec,
    /// Surrogate training; the label mode is forced to soft.
    pub train: TrainConfig,
    /// Seed for drawing the queried subset of the pool.
    pub sampling_seed: u64,
    pub query_batch: usize,
}

impl ExtractionConfig {
    pub fn new(budget: usize, surrogate_spec: ModelSpec, train: TrainConfig, sampling_seed: u64) -> Self {
        Self {
            budget,
            surrogate_spec,
            train,
            sampling_seed,
            query_batch: DEFAULT_QUERY_BATCH,
        }
    }

    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::InvalidConfig("extraction budget must be >= 1".into()));
        }
        if self.budget > pool_size {
            return Err(Error::BudgetExceedsPool {
                budget: self.budget,
                pool: pool_size,
            });
        }
        if self.query_batch == 0 {
            return Err(Error::InvalidConfig("query batch must be >= 1".into()));
        }
        self.surrogate_spec.validate()?;
        self.train.validate()
    }
}

/// Queries `budget` pool samples drawn without replacement (seeded order),
/// in batches of `query_batch`. The pool's own labels are never read.
pub fn build_transferset(
    oracle: &dyn Oracle,
    pool: &LabeledDataset,
    budget: usize,
    seed: u64,
    query_batch: usize,
) -> Result<TransferSet> {
    if budget == 0 {
        return Err(Error::InvalidConfig("extraction budget must be >= 1".into()));
    }
    if budget > pool.len() {
        return Err(Error::BudgetExceedsPool {
            budget,
            pool: pool.len(),
        });
    }
    if pool.role == Role::HeldoutTest {
        return Err(Error::RoleViolation(format!(
            "`{}` is a heldout test set and cannot seed a transfer set",
            pool.name
        )));
    }
    let order = permutation(pool.len(), Some(seed));
    let chosen = &order[..budget];
    let inputs = pool.inputs().gather_rows(chosen)?;
    let k = oracle.num_classes();
    let mut probs = Vec::with_capacity(budget * k);
    let mut start = 0;
    while start < budget {
        let end = (start + query_batch.max(1)).min(budget);
        let batch = inputs.slice_rows(start, end)?;
        let answer = oracle.query(&batch)?;
        if answer.shape() != [end - start, k] {
            return Err(Error::MalformedResponse(format!(
                "oracle answered shape {:?} for {} rows of {k} classes",
                answer.shape(),
                end - start
            )));
        }
        check_probability_rows(&answer)
            .map_err(|e| Error::MalformedResponse(e.to_string()))?;
        probs.extend_from_slice(answer.data());
        start = end;
    }
    let soft = Tensor::new([budget, k], probs)?;
    TransferSet::new(
        inputs,
        soft,
        Provenance {
            oracle_id: oracle.id(),
            pool_id: pool.name.clone(),
            seed,
            budget,
        },
    )
}

/// Trains a fresh surrogate (initialized from `config.train.seed`) on soft labels.
pub fn train_surrogate(config: &ExtractionConfig, transferset: &TransferSet) -> Result<Model> {
    if transferset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let train_cfg = TrainConfig {
        label_mode: LabelMode::Soft,
        ..config.train.clone()
    };
    let fresh = Model::build(config.surrogate_spec.clone(), train_cfg.seed)?;
    let (mut model, _) = train(fresh, transferset, &train_cfg)?;
    let p = &transferset.provenance;
    let tags = &mut model.meta.tags;
    tags.insert("oracle".into(), p.oracle_id.clone());
    tags.insert("pool".into(), p.pool_id.clone());
    tags.insert("budget".into(), p.budget.to_string());
    tags.insert("sampling_seed".into(), p.seed.to_string());
    Ok(model)
}

/// Result of one extraction from the attacker's side.
#[derive(Clone, Debug)]
pub struct Extraction {
    pub surrogate: Model,
    pub transferset: TransferSet,
    /// Oracle samples consumed by this extraction.
    pub queries_used: usize,
}

/// [`build_transferset`] followed by [`train_surrogate`].
pub fn extract(oracle: &dyn Oracle, pool: &LabeledDataset, config: &ExtractionConfig) -> Result<Extraction> {
    config.validate(pool.len())?;
    let before = oracle.queries_used();
    let transferset = build_transferset(
        oracle,
        pool,
        config.budget,
        config.sampling_seed,
        config.query_batch,
    )?;
    let queries_used = oracle.queries_used() - before;
    let surrogate = train_surrogate(config, &transferset)?;
    Ok(Extraction {
        surrogate,
        transferset,
        queries_used,
    })
}
