//! Trend checks over a finished experiment's reports.
//!
//! Mandatory checks:
//! - T1: per victim type, the median agreement over seeds does not fall by
//!   more than [`MONOTONE_SLACK`] from one budget to the next.
//! - T2: at the smallest budget, the median agreement of surrogates of
//!   adversarially trained victims (pooled over victim types and seeds) is at
//!   least the natural victim's median.
//! - T3: at the largest budget, surrogates of adversarially trained victims
//!   have a strictly higher median white-box accuracy at ε = 0.1 (averaged
//!   over the grid's techniques) than surrogates of the natural victim.
//! - T4: the PGD ε = 0.1 trained victim beats the natural victim by at least
//!   [`ROBUSTNESS_GAIN`] in PGD ε = 0.1 accuracy (median of per-seed gaps).
//!
//! Informational: the natural victim is accurate and FGSM ε = 0.1 hurts it,
//! and victim grids order natural below adversarially trained victims.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xlab_core::attack::Technique;
use xlab_core::metrics::{AdvGrid, ExtractionReport, VictimType};

use crate::error::{Result, XlabError};
use crate::experiment::{load_reports, ReportDocument, REPORTS_JSON};

pub const MIN_SEEDS: usize = 3;
pub const TREND_EPSILON: f32 = 0.1;
pub const MONOTONE_SLACK: f64 = 0.02;
pub const ROBUSTNESS_GAIN: f64 = 0.20;
pub const CLEAN_ACCURACY: f64 = 0.95;
pub const EVASION_DROP: f64 = 0.30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    pub description: String,
    pub mandatory: bool,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    /// Medians behind `measured`, for the record.
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendVerdict {
    pub experiment_id: String,
    pub seeds: Vec<u64>,
    pub checks: Vec<TrendCheck>,
    /// All mandatory checks passed.
    pub passed: bool,
}

impl TrendVerdict {
    pub fn check(&self, name: &str) -> Option<&TrendCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for TrendVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<3} {} measured={:.4} threshold={:.4} ({})",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                if c.mandatory { "mandatory" } else { "info" },
                c.measured,
                c.threshold,
                c.detail
            )?;
        }
        write!(f, "overall: {}", if self.passed { "PASS" } else { "FAIL" })
    }
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Mean over techniques of a grid's accuracy at `eps`.
fn grid_at(grid: &AdvGrid, eps: f32) -> Option<f64> {
    let vals: Vec<f64> = grid
        .points
        .iter()
        .filter(|p| p.epsilon == eps)
        .map(|p| p.accuracy)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

type Key = (u8, u8, u32);

fn by_type(reports: &[ExtractionReport]) -> BTreeMap<Key, (VictimType, Vec<&ExtractionReport>)> {
    let mut m: BTreeMap<Key, (VictimType, Vec<&ExtractionReport>)> = BTreeMap::new();
    for r in reports {
        m.entry(r.victim_type.sort_key())
            .or_insert_with(|| (r.victim_type, Vec::new()))
            .1
            .push(r);
    }
    m
}

fn fmt_med(x: f64) -> String {
    format!("{x:.4}")
}

fn t1(reports: &[ExtractionReport]) -> TrendCheck {
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for (_, (vt, rs)) in by_type(reports) {
        let budgets: BTreeSet<usize> = rs.iter().map(|r| r.budget).collect();
        let medians: Vec<f64> = budgets
            .iter()
            .map(|&b| {
                let vals: Vec<f64> = rs.iter().filter(|r| r.budget == b).map(|r| r.agreement).collect();
                median(&vals)
            })
            .collect();
        let drop = medians
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(0.0f64, f64::max);
        worst = worst.max(drop);
        detail.push(format!(
            "{vt}: [{}]",
            medians.iter().map(|m| fmt_med(*m)).collect::<Vec<_>>().join(", ")
        ));
    }
    TrendCheck {
        name: "T1".into(),
        description: "median agreement is non-decreasing in budget (largest single-step drop)".into(),
        mandatory: true,
        passed: worst <= MONOTONE_SLACK + 1e-12,
        measured: worst,
        threshold: MONOTONE_SLACK,
        detail: detail.join("; "),
    }
}

fn split_nat_adv<'a>(
    reports: &'a [ExtractionReport],
    budget: usize,
    value: impl Fn(&ExtractionReport) -> Option<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let (mut nat, mut adv) = (Vec::new(), Vec::new());
    for r in reports.iter().filter(|r| r.budget == budget) {
        if let Some(v) = value(r) {
            if r.victim_type.is_natural() {
                nat.push(v);
            } else {
                adv.push(v);
            }
        }
    }
    (nat, adv)
}

fn missing(name: &str, description: &str, threshold: f64, why: String) -> TrendCheck {
    TrendCheck {
        name: name.into(),
        description: description.into(),
        mandatory: true,
        passed: false,
        measured: f64::NAN,
        threshold,
        detail: why,
    }
}

fn t2(reports: &[ExtractionReport]) -> TrendCheck {
    let desc = "agreement gain (adv / natural medians) at the smallest budget";
    let Some(b) = reports.iter().map(|r| r.budget).min() else {
        return missing("T2", desc, 1.0, "no extraction reports".into());
    };
    let (nat, adv) = split_nat_adv(reports, b, |r| Some(r.agreement));
    if nat.is_empty() || adv.is_empty() {
        return missing("T2", desc, 1.0, format!("budget {b} lacks natural or adversarial victims"));
    }
    let (mn, ma) = (median(&nat), median(&adv));
    let gain = ma / mn;
    TrendCheck {
        name: "T2".into(),
        description: desc.into(),
        mandatory: true,
        passed: gain >= 1.0,
        measured: gain,
        threshold: 1.0,
        detail: format!("budget {b}: adv median {}, natural median {}", fmt_med(ma), fmt_med(mn)),
    }
}

fn t3(reports: &[ExtractionReport]) -> TrendCheck {
    let desc = "surrogate white-box accuracy at eps 0.1, adv minus natural medians, largest budget";
    let Some(b) = reports.iter().map(|r| r.budget).max() else {
        return missing("T3", desc, 0.0, "no extraction reports".into());
    };
    let (nat, adv) = split_nat_adv(reports, b, |r| grid_at(&r.adv_grid, TREND_EPSILON));
    if nat.is_empty() || adv.is_empty() {
        return missing("T3", desc, 0.0, format!("no eps {TREND_EPSILON} grid values at budget {b}"));
    }
    let (mn, ma) = (median(&nat), median(&adv));
    let (tn, ta) = split_nat_adv(reports, b, |r| grid_at(&r.transfer_grid, TREND_EPSILON));
    let transfer = if tn.is_empty() || ta.is_empty() {
        String::new()
    } else {
        format!(
            "; transfer grid: adv {}, natural {}",
            fmt_med(median(&ta)),
            fmt_med(median(&tn))
        )
    };
    TrendCheck {
        name: "T3".into(),
        description: desc.into(),
        mandatory: true,
        passed: ma > mn,
        measured: ma - mn,
        threshold: 0.0,
        detail: format!(
            "budget {b}: adv median {}, natural median {}{transfer}",
            fmt_med(ma),
            fmt_med(mn)
        ),
    }
}

fn victim_acc(doc: &ReportDocument, vt: VictimType, seed: u64, t: Technique, eps: f32) -> Option<f64> {
    doc.victims
        .iter()
        .find(|v| v.victim_type == vt && v.seed == seed)
        .and_then(|v| v.adv_grid.get(t, eps))
}

fn t4(doc: &ReportDocument, seeds: &[u64]) -> TrendCheck {
    let desc = "pgd(0.1)-trained minus natural victim accuracy under pgd at eps 0.1";
    let robust = VictimType::Adversarial {
        technique: Technique::Pgd,
        epsilon: TREND_EPSILON,
    };
    let gaps: Option<Vec<f64>> = seeds
        .iter()
        .map(|&s| {
            let a = victim_acc(doc, robust, s, Technique::Pgd, TREND_EPSILON)?;
            let n = victim_acc(doc, VictimType::Natural, s, Technique::Pgd, TREND_EPSILON)?;
            Some(a - n)
        })
        .collect();
    let Some(gaps) = gaps else {
        return missing(
            "T4",
            desc,
            ROBUSTNESS_GAIN,
            format!("needs {robust} and natural victims with a pgd eps {TREND_EPSILON} grid for every seed"),
        );
    };
    let m = median(&gaps);
    TrendCheck {
        name: "T4".into(),
        description: desc.into(),
        mandatory: true,
        passed: m >= ROBUSTNESS_GAIN,
        measured: m,
        threshold: ROBUSTNESS_GAIN,
        detail: format!(
            "per-seed gaps [{}]",
            gaps.iter().map(|g| fmt_med(*g)).collect::<Vec<_>>().join(", ")
        ),
    }
}

fn evasion(doc: &ReportDocument, seeds: &[u64]) -> TrendCheck {
    let desc = "natural victim: clean accuracy and fgsm eps 0.1 accuracy drop";
    let mut clean = Vec::new();
    let mut drops = Vec::new();
    for &s in seeds {
        let Some(v) = doc
            .victims
            .iter()
            .find(|v| v.victim_type.is_natural() && v.seed == s)
        else {
            continue;
        };
        clean.push(v.test_acc);
        if let Some(a) = v.adv_grid.get(Technique::Fgsm, TREND_EPSILON) {
            drops.push(v.test_acc - a);
        }
    }
    if clean.len() != seeds.len() || drops.len() != seeds.len() {
        let mut c = missing("E", desc, EVASION_DROP, "natural victim fgsm eps 0.1 grid missing".into());
        c.mandatory = false;
        return c;
    }
    let (mc, md) = (median(&clean), median(&drops));
    TrendCheck {
        name: "E".into(),
        description: desc.into(),
        mandatory: false,
        passed: mc >= CLEAN_ACCURACY && md >= EVASION_DROP,
        measured: md,
        threshold: EVASION_DROP,
        detail: format!("clean median {} (needs {CLEAN_ACCURACY}), drop median {}", fmt_med(mc), fmt_med(md)),
    }
}

fn victim_order(doc: &ReportDocument, seeds: &[u64]) -> TrendCheck {
    let desc = "victim grids: natural median at or below every adv victim's median for eps >= 0.05";
    let mut violations = Vec::new();
    let mut cells = 0usize;
    let mut types: Vec<VictimType> = Vec::new();
    for v in &doc.victims {
        if !v.victim_type.is_natural() && !types.contains(&v.victim_type) {
            types.push(v.victim_type);
        }
    }
    let Some(first) = doc.victims.first() else {
        let mut c = missing("V", desc, 0.0, "no victims".into());
        c.mandatory = false;
        return c;
    };
    for p in first.adv_grid.points.iter().filter(|p| p.epsilon >= 0.05) {
        let med = |vt: VictimType| {
            let vals: Vec<f64> = seeds
                .iter()
                .filter_map(|&s| victim_acc(doc, vt, s, p.technique, p.epsilon))
                .collect();
            (!vals.is_empty()).then(|| median(&vals))
        };
        let Some(n) = med(VictimType::Natural) else { continue };
        for &vt in &types {
            if let Some(a) = med(vt) {
                cells += 1;
                if n > a {
                    violations.push(format!("{vt} {}@{}", p.technique, p.epsilon));
                }
            }
        }
    }
    TrendCheck {
        name: "V".into(),
        description: desc.into(),
        mandatory: false,
        passed: violations.is_empty() && cells > 0,
        measured: violations.len() as f64,
        threshold: 0.0,
        detail: if violations.is_empty() {
            format!("{cells} cells ordered")
        } else {
            format!("{} of {cells} cells out of order: {}", violations.len(), violations.join(", "))
        },
    }
}

/// Evaluates every check on a report document.
pub fn evaluate_trends(doc: &ReportDocument) -> Result<TrendVerdict> {
    let seeds: Vec<u64> = doc
        .extractions
        .iter()
        .map(|r| r.seed)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if seeds.len() < MIN_SEEDS {
        return Err(XlabError::InsufficientSeeds {
            found: seeds.len(),
            required: MIN_SEEDS,
        });
    }
    let checks = vec![
        t1(&doc.extractions),
        t2(&doc.extractions),
        t3(&doc.extractions),
        t4(doc, &seeds),
        evasion(doc, &seeds),
        victim_order(doc, &seeds),
    ];
    let passed = checks.iter().filter(|c| c.mandatory).all(|c| c.passed);
    Ok(TrendVerdict {
        experiment_id: doc.experiment_id.clone(),
        seeds,
        checks,
        passed,
    })
}

/// Reads the experiment's reports and evaluates the checks. A missing report
/// counts as zero seeds.
pub fn run_trends(experiment_dir: impl AsRef<Path>) -> Result<TrendVerdict> {
    let dir = experiment_dir.as_ref();
    if !dir.join(REPORTS_JSON).exists() {
        return Err(XlabError::InsufficientSeeds {
            found: 0,
            required: MIN_SEEDS,
        });
    }
    evaluate_trends(&load_reports(dir)?)
}
