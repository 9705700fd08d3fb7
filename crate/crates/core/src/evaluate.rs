//! Prescription validation and weight tuning.
//!
//! Validation runs on patients who were never treated: a patient who later
//! had the event should have been prescribed treatment (true positive), a
//! patient who stayed event-free should have been spared it (true negative).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::PatientRecord;
use crate::counterfactual::{self, CounterfactualError, CounterfactualPair};
use crate::matcher::MatchedCohort;
use crate::par;
use crate::policy_tree::{self, PolicyError, PolicyTree, TreeConfig};
use crate::risk_forest::ForestConfig;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959963984540054;

#[derive(Debug, Error, PartialEq)]
pub enum EvaluateError {
    #[error("validation record {0} was treated")]
    TreatedRecordPresent(String),
    #[error("validation cohort is empty")]
    EmptyCohort,
    #[error("weight grid is empty")]
    EmptyGrid,
    #[error("weight {0} is below 1")]
    InvalidRho(f64),
    #[error("specificity floor {0} outside [0, 1]")]
    InvalidFloor(f64),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Counterfactual(#[from] CounterfactualError),
}

pub type Result<T, E = EvaluateError> = std::result::Result<T, E>;

/// A proportion with its Wilson score interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub successes: usize,
    pub trials: usize,
}

impl Metric {
    /// `None` when there are no trials.
    pub fn new(successes: usize, trials: usize) -> Option<Metric> {
        if trials == 0 {
            return None;
        }
        let (lower, upper) = wilson_interval(successes, trials, Z_95);
        Some(Metric {
            value: successes as f64 / trials as f64,
            lower,
            upper,
            successes,
            trials,
        })
    }
}

/// Wilson score interval for `successes` out of `trials`.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    // Rounding can leave p = 0 or 1 a hair outside its own interval.
    ((centre - half).clamp(0.0, p), (centre + half).clamp(p, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationResult {
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
    pub sensitivity: Option<Metric>,
    pub specificity: Option<Metric>,
    pub npv: Option<Metric>,
}

impl ValidationResult {
    pub fn from_counts(tp: usize, fn_: usize, tn: usize, fp: usize) -> Self {
        ValidationResult {
            tp,
            fn_,
            tn,
            fp,
            sensitivity: Metric::new(tp, tp + fn_),
            specificity: Metric::new(tn, tn + fp),
            npv: Metric::new(tn, tn + fn_),
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.tn + self.fp
    }
}

/// Scores `tree` on untreated patients with observed outcomes.
pub fn validate(tree: &PolicyTree, external: &[PatientRecord]) -> Result<ValidationResult> {
    if external.is_empty() {
        return Err(EvaluateError::EmptyCohort);
    }
    if let Some(r) = external.iter().find(|r| r.treated) {
        return Err(EvaluateError::TreatedRecordPresent(r.id.clone()));
    }
    let (mut tp, mut fn_, mut tn, mut fp) = (0, 0, 0, 0);
    for r in external {
        match (r.event, tree.prescribe(&r.covariates)?) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    Ok(ValidationResult::from_counts(tp, fn_, tn, fp))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum SelectionRule {
    /// Highest sensitivity among weights whose specificity reaches `floor`.
    MaxSensWithSpecFloor { floor: f64 },
    /// Highest sensitivity + specificity.
    MaxSum,
}

impl Default for SelectionRule {
    fn default() -> Self {
        SelectionRule::MaxSensWithSpecFloor { floor: 0.5 }
    }
}

impl SelectionRule {
    pub fn tag(&self) -> String {
        match self {
            SelectionRule::MaxSensWithSpecFloor { floor } => format!("max-sens-with-spec-floor({floor})"),
            SelectionRule::MaxSum => "max-sum".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningRow {
    pub rho: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningTable {
    pub rows: Vec<TuningRow>,
    pub selected_rho: f64,
    pub rule: String,
    /// Set when no row met the rule's constraint and the most specific
    /// weight was chosen instead.
    pub fallback: bool,
}

impl TuningTable {
    /// Table of `weight,sensitivity,specificity`; undefined metrics are blank.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["weight", "sensitivity", "specificity"])?;
        let show = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        for row in &self.rows {
            w.write_record([format!("{}", row.rho), show(row.sensitivity), show(row.specificity)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Applies `rule` to `rows` (sorted by weight in place). Ties go to the lower
/// weight; undefined metrics never satisfy a constraint. Returns the selected
/// weight and whether the specificity fallback was used.
pub fn select(rows: &mut [TuningRow], rule: SelectionRule) -> Result<(f64, bool)> {
    if rows.is_empty() {
        return Err(EvaluateError::EmptyGrid);
    }
    rows.sort_by(|a, b| a.rho.total_cmp(&b.rho));
    let best_by = |score: &dyn Fn(&TuningRow) -> Option<f64>| {
        let mut best: Option<(f64, f64)> = None;
        for row in rows.iter() {
            if let Some(s) = score(row) {
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((row.rho, s));
                }
            }
        }
        best.map(|(rho, _)| rho)
    };
    let chosen = match rule {
        SelectionRule::MaxSensWithSpecFloor { floor } => {
            if !(0.0..=1.0).contains(&floor) {
                return Err(EvaluateError::InvalidFloor(floor));
            }
            best_by(&|r| match (r.sensitivity, r.specificity) {
                (Some(sens), Some(spec)) if spec >= floor => Some(sens),
                _ => None,
            })
        }
        SelectionRule::MaxSum => best_by(&|r| Some(r.sensitivity? + r.specificity?)),
    };
    Ok(match chosen {
        Some(rho) => (rho, false),
        None => (
            best_by(&|r| r.specificity).unwrap_or(rows[0].rho),
            true,
        ),
    })
}

/// One grid point of the tuning protocol.
#[derive(Debug, Clone)]
pub struct TunedPolicy {
    pub pair: CounterfactualPair,
    pub rewards: Vec<(f64, f64)>,
    pub tree: PolicyTree,
    pub validation: ValidationResult,
}

/// Counterfactual models, rewards, policy and validation at weight `rho`.
pub fn policy_at(
    matched: &MatchedCohort,
    validation: &[PatientRecord],
    feature_names: &[String],
    rho: f64,
    tree_config: &TreeConfig,
    forest_config: &ForestConfig,
) -> Result<TunedPolicy> {
    let pair = counterfactual::train_pair(matched, rho, forest_config)?;
    finish(pair, matched, validation, feature_names, tree_config)
}

fn finish(
    pair: CounterfactualPair,
    matched: &MatchedCohort,
    validation: &[PatientRecord],
    feature_names: &[String],
    tree_config: &TreeConfig,
) -> Result<TunedPolicy> {
    let rewards = counterfactual::rewards(&pair, &matched.records)?;
    let tree = policy_tree::train_policy(&matched.features(), &rewards, feature_names, tree_config)?;
    let result = validate(&tree, validation)?;
    Ok(TunedPolicy {
        pair,
        rewards,
        tree,
        validation: result,
    })
}

/// Trains and validates one policy per weight in `grid` and selects a weight
/// by `rule`. The untreated-arm model does not depend on the weight and is
/// fitted once. Returns the table and the policies in ascending weight order.
pub fn tune_weight(
    matched: &MatchedCohort,
    validation: &[PatientRecord],
    feature_names: &[String],
    grid: &[f64],
    tree_config: &TreeConfig,
    forest_config: &ForestConfig,
    rule: SelectionRule,
) -> Result<(TuningTable, Vec<TunedPolicy>)> {
    if grid.is_empty() {
        return Err(EvaluateError::EmptyGrid);
    }
    if let Some(&rho) = grid.iter().find(|r| !(r.is_finite() && **r >= 1.0)) {
        return Err(EvaluateError::InvalidRho(rho));
    }
    if validation.is_empty() {
        return Err(EvaluateError::EmptyCohort);
    }
    if let Some(r) = validation.iter().find(|r| r.treated) {
        return Err(EvaluateError::TreatedRecordPresent(r.id.clone()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let (h0, w_hat_0) = counterfactual::fit_untreated(&matched.records, forest_config)?;
    let outcomes = par::map(&grid, |&rho| {
        let (h1, w_hat_1) = counterfactual::fit_treated(&matched.records, rho, forest_config)?;
        let pair = CounterfactualPair {
            h0: h0.clone(),
            h1,
            rho,
            w_hat_0,
            w_hat_1,
        };
        finish(pair, matched, validation, feature_names, tree_config)
    });
    let policies = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<TuningRow> = policies
        .iter()
        .map(|p| TuningRow {
            rho: p.pair.rho,
            sensitivity: p.validation.sensitivity.map(|m| m.value),
            specificity: p.validation.specificity.map(|m| m.value),
        })
        .collect();
    let (selected_rho, fallback) = select(&mut rows, rule)?;
    Ok((
        TuningTable {
            rows,
            selected_rho,
            rule: rule.tag(),
            fallback,
        },
        policies,
    ))
}

/// Validation metrics of policies grown under different tree settings at a
/// fixed weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadRow {
    pub max_depth: usize,
    pub minbucket: usize,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadReport {
    pub rho: f64,
    pub rows: Vec<SpreadRow>,
    /// max - min over rows with a defined value.
    pub sensitivity_range: Option<f64>,
    pub specificity_range: Option<f64>,
}

fn range(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    let lo = v.iter().copied().reduce(f64::min)?;
    let hi = v.iter().copied().reduce(f64::max)?;
    Some(hi - lo)
}

/// Re-grows the policy for every `(max_depth, minbucket)` combination at the
/// rewards of `policy` and reports how much the validation metrics move.
pub fn hyperparameter_spread(
    policy: &TunedPolicy,
    matched: &MatchedCohort,
    validation: &[PatientRecord],
    depths: &[usize],
    minbuckets: &[usize],
    base: &TreeConfig,
) -> Result<SpreadReport> {
    let combos: Vec<(usize, usize)> = depths
        .iter()
        .flat_map(|&d| minbuckets.iter().map(move |&m| (d, m)))
        .collect();
    let features = matched.features();
    let names = &policy.tree.feature_names;
    let rows = par::map(&combos, |&(max_depth, minbucket)| {
        let config = TreeConfig {
            max_depth,
            minbucket,
            ..base.clone()
        };
        let tree = policy_tree::train_policy(&features, &policy.rewards, names, &config)?;
        let result = validate(&tree, validation)?;
        Ok(SpreadRow {
            max_depth,
            minbucket,
            sensitivity: result.sensitivity.map(|m| m.value),
            specificity: result.specificity.map(|m| m.value),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(SpreadReport {
        rho: policy.pair.rho,
        sensitivity_range: range(rows.iter().map(|r| r.sensitivity)),
        specificity_range: range(rows.iter().map(|r| r.specificity)),
        rows,
    })
}
