//! Accuracy, agreement, adversarial-accuracy grids and extraction-gain ratios.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::attack::{craft_adversarial_set, AttackConfig, Technique};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

fn match_rate(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(hits as f64 / a.len() as f64)
}

/// Fraction of positions where `predicted` equals `truth`.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    match_rate(predicted, truth)
}

/// Fraction of inputs on which both models predict the same label,
/// regardless of whether that label is correct.
pub fn agreement(surrogate: &Model, victim: &Model, inputs: &Tensor) -> Result<f64> {
    let a = surrogate.predict_label(inputs)?;
    let b = victim.predict_label(inputs)?;
    match_rate(&a, &b)
}

/// Accuracy under one attack setting.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GridPoint {
    pub technique: Technique,
    pub epsilon: f32,
    pub accuracy: f64,
}

/// Adversarial accuracy over `techniques × eps_grid`, in that nesting order.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdvGrid {
    pub points: Vec<GridPoint>,
}

impl AdvGrid {
    pub fn get(&self, technique: Technique, epsilon: f32) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.technique == technique && p.epsilon == epsilon)
            .map(|p| p.accuracy)
    }
}

/// Adversarial copies of a test set for every grid cell; `ε = 0` keeps the
/// clean inputs.
pub struct CraftedGrid {
    pub cells: Vec<(Technique, f32, LabeledDataset)>,
}

/// Crafts every `(technique, ε)` set against `source` with the preset attacks.
pub fn craft_grid(
    source: &Model,
    test: &LabeledDataset,
    techniques: &[Technique],
    eps_grid: &[f32],
) -> Result<CraftedGrid> {
    if techniques.is_empty() || eps_grid.is_empty() {
        return Err(Error::InvalidConfig("adversarial grid needs techniques and epsilons".into()));
    }
    let mut cells = Vec::with_capacity(techniques.len() * eps_grid.len());
    for &t in techniques {
        for &eps in eps_grid {
            let set = if eps == 0.0 {
                test.clone()
            } else {
                craft_adversarial_set(source, test, &AttackConfig::preset(t, eps))?
            };
            cells.push((t, eps, set));
        }
    }
    Ok(CraftedGrid { cells })
}

impl CraftedGrid {
    /// Accuracy of `model` on every crafted set.
    pub fn evaluate(&self, model: &Model) -> Result<AdvGrid> {
        let points = self
            .cells
            .iter()
            .map(|(t, eps, set)| {
                let pred = model.predict_label(set.inputs())?;
                Ok(GridPoint {
                    technique: *t,
                    epsilon: *eps,
                    accuracy: accuracy(&pred, set.labels())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AdvGrid { points })
    }
}

/// White-box grid: every set is crafted against `model` itself.
pub fn adv_accuracy_grid(
    model: &Model,
    test: &LabeledDataset,
    techniques: &[Technique],
    eps_grid: &[f32],
) -> Result<AdvGrid> {
    craft_grid(model, test, techniques, eps_grid)?.evaluate(model)
}

/// Transfer grid: sets crafted against `source`, accuracy of `target`.
pub fn transfer_accuracy_grid(
    source: &Model,
    target: &Model,
    test: &LabeledDataset,
    techniques: &[Technique],
    eps_grid: &[f32],
) -> Result<AdvGrid> {
    craft_grid(source, test, techniques, eps_grid)?.evaluate(target)
}

/// How a victim was trained.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(into = "String", try_from = "String"))]
pub enum VictimType {
    Natural,
    Adversarial { technique: Technique, epsilon: f32 },
}

impl VictimType {
    pub fn is_natural(&self) -> bool {
        matches!(self, VictimType::Natural)
    }

    /// `natural`, `adv-fgsm` or `adv-pgd`.
    pub fn family(&self) -> String {
        match self {
            VictimType::Natural => "natural".into(),
            VictimType::Adversarial { technique, .. } => format!("adv-{technique}"),
        }
    }

    pub fn technique(&self) -> Option<Technique> {
        match self {
            VictimType::Natural => None,
            VictimType::Adversarial { technique, .. } => Some(*technique),
        }
    }

    pub fn epsilon(&self) -> f32 {
        match self {
            VictimType::Natural => 0.0,
            VictimType::Adversarial { epsilon, .. } => *epsilon,
        }
    }

    /// Total order used for stable report layouts: natural first, then by
    /// technique and ε.
    pub fn sort_key(&self) -> (u8, u8, u32) {
        match self {
            VictimType::Natural => (0, 0, 0),
            VictimType::Adversarial { technique, epsilon } => (1, *technique as u8, epsilon.to_bits()),
        }
    }
}

impl fmt::Display for VictimType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VictimType::Natural => f.write_str("natural"),
            VictimType::Adversarial { technique, epsilon } => {
                write!(f, "adv-{technique}({epsilon})")
            }
        }
    }
}

impl FromStr for VictimType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "natural" {
            return Ok(VictimType::Natural);
        }
        let bad = || Error::InvalidConfig(format!("unknown victim type `{s}`"));
        let rest = s.strip_prefix("adv-").ok_or_else(bad)?;
        let (tech, eps) = rest.split_once('(').ok_or_else(bad)?;
        let eps = eps.strip_suffix(')').ok_or_else(bad)?;
        Ok(VictimType::Adversarial {
            technique: tech.parse()?,
            epsilon: eps.parse().map_err(|_| bad())?,
        })
    }
}

impl From<VictimType> for String {
    fn from(v: VictimType) -> String {
        v.to_string()
    }
}

impl TryFrom<String> for VictimType {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Outcome of extracting one victim at one budget for one seed.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExtractionReport {
    pub victim_id: String,
    pub victim_type: VictimType,
    pub budget: usize,
    pub seed: u64,
    /// Surrogate accuracy on the heldout test set.
    pub test_acc: f64,
    /// Surrogate/victim agreement on the heldout test set.
    pub agreement: f64,
    /// Surrogate accuracy on examples crafted against the surrogate.
    pub adv_grid: AdvGrid,
    /// Surrogate accuracy on examples crafted against the victim.
    pub transfer_grid: AdvGrid,
    pub queries_used: usize,
}

/// Gains of one adversarially trained victim type at one budget.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GainRow {
    pub victim_type: VictimType,
    pub budget: usize,
    /// Mean surrogate accuracy (adv victim) / mean surrogate accuracy (natural victim).
    pub accuracy_gain: f64,
    pub agreement_gain: f64,
    /// Smallest `B′/B` at which the adv victim's surrogate accuracy reaches the
    /// natural baseline at `B`; `None` when parity is not reached within `B`.
    pub parity_fraction: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GainTable {
    pub rows: Vec<GainRow>,
}

impl GainTable {
    pub fn get(&self, victim_type: VictimType, budget: usize) -> Option<&GainRow> {
        self.rows
            .iter()
            .find(|r| r.victim_type == victim_type && r.budget == budget)
    }
}

/// Smallest budget at which the piecewise-linear curve through `points`
/// (ascending budgets) first reaches `target`. No extrapolation.
pub fn parity_budget(points: &[(usize, f64)], target: f64) -> Option<f64> {
    let (b0, a0) = *points.first()?;
    if a0 >= target {
        return Some(b0 as f64);
    }
    for w in points.windows(2) {
        let ((bl, al), (bh, ah)) = (w[0], w[1]);
        if ah >= target && al < target {
            let t = (target - al) / (ah - al);
            return Some(bl as f64 + t * (bh as f64 - bl as f64));
        }
    }
    None
}

/// Per `(victim type, budget)` ratios of seed-averaged surrogate metrics to
/// the natural victim's at the same budget.
pub fn extraction_gains(reports: &[ExtractionReport]) -> Result<GainTable> {
    // (victim key, budget) -> (sum acc, sum agreement, count)
    let mut cells: BTreeMap<((u8, u8, u32), usize), (VictimType, f64, f64, usize)> = BTreeMap::new();
    for r in reports {
        let e = cells
            .entry((r.victim_type.sort_key(), r.budget))
            .or_insert((r.victim_type, 0.0, 0.0, 0));
        e.1 += r.test_acc;
        e.2 += r.agreement;
        e.3 += 1;
    }
    let mean = |v: &(VictimType, f64, f64, usize)| (v.1 / v.3 as f64, v.2 / v.3 as f64);
    let natural_key = VictimType::Natural.sort_key();
    let mut rows = Vec::new();
    for (&(key, budget), cell) in &cells {
        if key == natural_key {
            continue;
        }
        let base = cells
            .get(&(natural_key, budget))
            .ok_or(Error::MissingBaseline { budget: budget as u64 })?;
        let (acc, agr) = mean(cell);
        let (nacc, nagr) = mean(base);
        if nacc <= 0.0 || nagr <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "natural baseline at budget {budget} has a zero rate"
            )));
        }
        let curve: Vec<(usize, f64)> = cells
            .range((key, 0)..=(key, usize::MAX))
            .map(|(&(_, b), c)| (b, mean(c).0))
            .collect();
        let parity_fraction = parity_budget(&curve, nacc)
            .map(|b| b / budget as f64)
            .filter(|&f| f > 0.0 && f <= 1.0);
        rows.push(GainRow {
            victim_type: cell.0,
            budget,
            accuracy_gain: acc / nacc,
            agreement_gain: agr / nagr,
            parity_fraction,
        });
    }
    Ok(GainTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn report(vt: VictimType, budget: usize, acc: f64, agr: f64) -> ExtractionReport {
        ExtractionReport {
            victim_id: vt.to_string(),
            victim_type: vt,
            budget,
            seed: 0,
            test_acc: acc,
            agreement: agr,
            adv_grid: AdvGrid::default(),
            transfer_grid: AdvGrid::default(),
            queries_used: budget,
        }
    }

    const PGD10: VictimType = VictimType::Adversarial {
        technique: Technique::Pgd,
        epsilon: 0.1,
    };

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 2, 2], &[0, 2, 2, 2]).unwrap(), 0.75);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[], &[]), Err(Error::EmptyDataset));
        assert!(matches!(accuracy(&[0], &[0, 1]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn victim_type_text() {
        for vt in [VictimType::Natural, PGD10] {
            assert_eq!(vt.to_string().parse::<VictimType>().unwrap(), vt);
        }
        assert_eq!(PGD10.to_string(), "adv-pgd(0.1)");
        assert!("adv-cw(0.1)".parse::<VictimType>().is_err());
    }

    #[test]
    fn identical_reports_have_unit_gains() {
        let reports = vec![
            report(VictimType::Natural, 100, 0.6, 0.62),
            report(PGD10, 100, 0.6, 0.62),
        ];
        let g = extraction_gains(&reports).unwrap();
        assert_eq!(g.rows.len(), 1);
        assert_eq!(g.rows[0].accuracy_gain, 1.0);
        assert_eq!(g.rows[0].agreement_gain, 1.0);
        assert_eq!(g.rows[0].parity_fraction, Some(1.0));
    }

    #[test]
    fn missing_baseline() {
        let reports = vec![report(VictimType::Natural, 100, 0.6, 0.6), report(PGD10, 200, 0.7, 0.7)];
        assert_eq!(
            extraction_gains(&reports),
            Err(Error::MissingBaseline { budget: 200 })
        );
    }

    #[test]
    fn parity_interpolates_between_budgets() {
        let reports = vec![
            report(VictimType::Natural, 100, 0.50, 0.5),
            report(VictimType::Natural, 200, 0.70, 0.7),
            report(PGD10, 100, 0.60, 0.6),
            report(PGD10, 200, 0.80, 0.8),
        ];
        let g = extraction_gains(&reports).unwrap();
        let at200 = g.get(PGD10, 200).unwrap();
        // 0.70 is reached halfway between 100 (0.60) and 200 (0.80): B' = 150.
        assert!((at200.parity_fraction.unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(g.get(PGD10, 100).unwrap().parity_fraction, Some(1.0));
        assert_eq!(parity_budget(&[(100, 0.1), (200, 0.2)], 0.5), None);
    }

    #[test]
    fn gains_average_over_seeds() {
        let mut reports = vec![
            report(VictimType::Natural, 10, 0.4, 0.4),
            report(VictimType::Natural, 10, 0.6, 0.6),
            report(PGD10, 10, 0.6, 0.5),
        ];
        reports[1].seed = 1;
        let g = extraction_gains(&reports).unwrap();
        assert!((g.rows[0].accuracy_gain - 1.2).abs() < 1e-12);
        assert!((g.rows[0].agreement_gain - 1.0).abs() < 1e-12);
    }
}
