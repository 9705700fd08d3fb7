//! Synthetic cohorts with known ground truth.
//!
//! Observed covariates and a hidden confounder `u` are standard normal. The
//! untreated event probability is logistic in both,
//! `p0 = sigmoid(intercept + sum_j beta_j x_j + hidden_effect * u)`.
//! A planted policy tree over the observed covariates marks who benefits;
//! for them treatment lowers the event probability by `benefit_size`
//! (floored at 0), for everyone else it raises it by `harm_size` (capped at
//! 1). A positive harm makes the planted policy the unique optimum; with no
//! harm, non-beneficiaries are indifferent and count as "do not treat".
//!
//! Under observational assignment the chance of being treated rises with the
//! full untreated log-odds, hidden part included, so treated patients carry a
//! worse unobserved prognosis than their covariates suggest.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, Covariate, CovariateKind, PatientRecord, SchemaMapping};
use crate::policy_tree::{PolicyNode, PolicyTree};
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Assignment {
    /// `P(t = 1) = sigmoid(offset + strength * eta0)` with `eta0` the
    /// untreated log-odds.
    Observational { offset: f64, strength: f64 },
    /// Fair coin.
    Rct,
    /// Fair coin, except patients whose untreated risk is at least
    /// `band_floor` are treated with probability `treated_share`.
    RctImbalanced { band_floor: f64, treated_share: f64 },
    /// Nobody is treated; used for external validation cohorts.
    Untreated,
}

impl Assignment {
    pub fn observational() -> Self {
        Assignment::Observational {
            offset: 0.0,
            strength: 1.5,
        }
    }

    pub fn rct_imbalanced() -> Self {
        Assignment::RctImbalanced {
            band_floor: 0.5,
            treated_share: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    /// Observed covariates.
    pub d: usize,
    pub hidden_effect: f64,
    pub assignment: Assignment,
    /// Who benefits: leaves with `treat = true`. Split features index the
    /// observed covariates. `None` uses [`planted_policy`].
    pub true_policy: Option<PolicyNode>,
    pub benefit_size: f64,
    /// Risk increase from treatment for patients outside the benefit rule.
    pub harm_size: f64,
    pub intercept: f64,
    /// Log-odds coefficients of the observed covariates; missing entries are 0.
    /// Empty uses `0.8, 0.6, 0.4, 0.2, ...` (halving after the fourth).
    pub coefficients: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 2000,
            d: 4,
            hidden_effect: 1.0,
            assignment: Assignment::observational(),
            true_policy: None,
            benefit_size: 0.3,
            harm_size: 0.15,
            intercept: -0.5,
            coefficients: Vec::new(),
            seed: 0,
        }
    }
}

/// Depth-two benefit rule: `x0 >= -0.5` and `x1 < 0.75`.
pub fn planted_policy() -> PolicyNode {
    let leaf = |treat| PolicyNode::Leaf {
        treat,
        count: 0,
        mean_r0: 0.0,
        mean_r1: 0.0,
    };
    PolicyNode::Split {
        feature: 0,
        threshold: -0.5,
        left: Box::new(leaf(false)),
        right: Box::new(PolicyNode::Split {
            feature: 1,
            threshold: 0.75,
            left: Box::new(leaf(true)),
            right: Box::new(leaf(false)),
        }),
    }
}

pub fn covariate_names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("x{j}")).collect()
}

/// Column mapping for the CSV written by [`write_cohort_csv`].
pub fn schema_mapping(d: usize) -> SchemaMapping {
    SchemaMapping {
        id: Some("id".into()),
        treatment: "t".into(),
        outcome: "y".into(),
        continuous: covariate_names(d),
        categorical: Vec::new(),
    }
}

impl SynthConfig {
    fn coefficient(&self, j: usize) -> f64 {
        if self.coefficients.is_empty() {
            match j {
                0 => 0.8,
                1 => 0.6,
                2 => 0.4,
                _ => 0.2 * 0.5f64.powi(j as i32 - 3),
            }
        } else {
            self.coefficients.get(j).copied().unwrap_or(0.0)
        }
    }

    pub fn policy(&self) -> PolicyTree {
        PolicyTree {
            feature_names: covariate_names(self.d),
            root: self.true_policy.clone().unwrap_or_else(planted_policy),
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        if self.n < 50 {
            return bad("n must be at least 50");
        }
        if self.d == 0 {
            return bad("d must be positive");
        }
        if !(self.benefit_size >= 0.0 && self.benefit_size < 1.0) {
            return bad("benefit_size must lie in [0, 1)");
        }
        if !(self.harm_size >= 0.0 && self.harm_size < 1.0) {
            return bad("harm_size must lie in [0, 1)");
        }
        if !(self.hidden_effect >= 0.0 && self.hidden_effect.is_finite()) {
            return bad("hidden_effect must be finite and non-negative");
        }
        if !self.intercept.is_finite() || self.coefficients.iter().any(|c| !c.is_finite()) {
            return bad("coefficients must be finite");
        }
        if let Assignment::RctImbalanced {
            band_floor,
            treated_share,
        } = self.assignment
        {
            if !(0.0..=1.0).contains(&band_floor) || !(0.0..=1.0).contains(&treated_share) {
                return bad("band_floor and treated_share must lie in [0, 1]");
            }
        }
        fn max_feature(node: &PolicyNode) -> Option<usize> {
            match node {
                PolicyNode::Leaf { .. } => None,
                PolicyNode::Split {
                    feature, left, right, ..
                } => [Some(*feature), max_feature(left), max_feature(right)]
                    .into_iter()
                    .flatten()
                    .max(),
            }
        }
        if max_feature(&self.policy().root).is_some_and(|f| f >= self.d) {
            return bad("true_policy references a covariate beyond d");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub id: String,
    pub baseline_risk: f64,
    pub treated_risk: f64,
    pub hidden: f64,
    pub optimal_action: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub rows: Vec<TruthRow>,
}

impl GroundTruth {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id", "baseline_risk", "treated_risk", "hidden", "optimal_action"])?;
        for r in &self.rows {
            w.write_record([
                r.id.clone(),
                format!("{}", r.baseline_risk),
                format!("{}", r.treated_risk),
                format!("{}", r.hidden),
                u8::from(r.optimal_action).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> csv::Result<GroundTruth> {
        #[derive(Deserialize)]
        struct Row {
            id: String,
            baseline_risk: f64,
            treated_risk: f64,
            hidden: f64,
            optimal_action: u8,
        }
        let mut rows = Vec::new();
        for row in csv::Reader::from_reader(reader).deserialize() {
            let row: Row = row?;
            rows.push(TruthRow {
                id: row.id,
                baseline_risk: row.baseline_risk,
                treated_risk: row.treated_risk,
                hidden: row.hidden,
                optimal_action: row.optimal_action == 1,
            });
        }
        Ok(GroundTruth { rows })
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Draws a cohort (raw covariate scale) and its ground truth.
pub fn generate(config: &SynthConfig) -> Result<(Cohort, GroundTruth)> {
    config.check()?;
    let policy = config.policy();
    let mut rng = seed::rng(seed::derive(config.seed, "synthgen"));
    let mut records = Vec::with_capacity(config.n);
    let mut rows = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let x: Vec<f64> = (0..config.d).map(|_| rng.sample(StandardNormal)).collect();
        let u: f64 = rng.sample(StandardNormal);
        let eta0 = config.intercept
            + x.iter().enumerate().map(|(j, v)| config.coefficient(j) * v).sum::<f64>()
            + config.hidden_effect * u;
        let p0 = sigmoid(eta0);
        let benefits = policy.prescribe(&x).expect("policy dimension checked");
        let p1 = if benefits {
            (p0 - config.benefit_size).max(0.0)
        } else {
            (p0 + config.harm_size).min(1.0)
        };
        let p_treat = match config.assignment {
            Assignment::Observational { offset, strength } => sigmoid(offset + strength * eta0),
            Assignment::Rct => 0.5,
            Assignment::RctImbalanced {
                band_floor,
                treated_share,
            } => {
                if p0 >= band_floor {
                    treated_share
                } else {
                    0.5
                }
            }
            Assignment::Untreated => 0.0,
        };
        let treated = rng.random::<f64>() < p_treat;
        let event = rng.random::<f64>() < if treated { p1 } else { p0 };
        let id = format!("p{}", i + 1);
        rows.push(TruthRow {
            id: id.clone(),
            baseline_risk: p0,
            treated_risk: p1,
            hidden: u,
            optimal_action: p1 < p0,
        });
        records.push(PatientRecord {
            id,
            covariates: x,
            treated,
            event,
        });
    }
    let schema = covariate_names(config.d)
        .into_iter()
        .map(|name| Covariate {
            source: name.clone(),
            name,
            kind: CovariateKind::Continuous,
            level: None,
        })
        .collect();
    let cohort = Cohort::new(schema, records).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    Ok((cohort, GroundTruth { rows }))
}

/// Writes a generated cohort in the layout [`schema_mapping`] reads.
pub fn write_cohort_csv<W: std::io::Write>(cohort: &Cohort, writer: W) -> crate::cohort::Result<()> {
    cohort.write_csv(writer, "t", "y")
}

/// Fraction of `cohort`'s patients whose prescription under `tree` equals the
/// true optimal action. `cohort` must be on the scale `tree` was trained on;
/// patients absent from `truth` are skipped.
pub fn policy_agreement(tree: &PolicyTree, truth: &GroundTruth, cohort: &Cohort) -> f64 {
    let optimal: std::collections::HashMap<&str, bool> =
        truth.rows.iter().map(|r| (r.id.as_str(), r.optimal_action)).collect();
    let (mut agree, mut total) = (0usize, 0usize);
    for r in &cohort.records {
        let Some(&best) = optimal.get(r.id.as_str()) else {
            continue;
        };
        let Ok(action) = tree.prescribe(&r.covariates) else {
            continue;
        };
        total += 1;
        agree += usize::from(action == best);
    }
    if total == 0 {
        0.0
    } else {
        agree as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let c = SynthConfig {
            n: 200,
            seed: 9,
            ..SynthConfig::default()
        };
        assert_eq!(generate(&c).unwrap(), generate(&c).unwrap());
    }

    #[test]
    fn truth_is_self_consistent() {
        let (_, truth) = generate(&SynthConfig {
            n: 500,
            ..SynthConfig::default()
        })
        .unwrap();
        for r in &truth.rows {
            assert_eq!(r.optimal_action, r.treated_risk < r.baseline_risk);
        }
    }

    #[test]
    fn planted_policy_agrees_with_itself() {
        let c = SynthConfig {
            n: 500,
            ..SynthConfig::default()
        };
        let (cohort, truth) = generate(&c).unwrap();
        assert_eq!(policy_agreement(&c.policy(), &truth, &cohort), 1.0);
    }

    #[test]
    fn treat_all_agreement_counts_beneficiaries() {
        let c = SynthConfig {
            n: 500,
            ..SynthConfig::default()
        };
        let (cohort, truth) = generate(&c).unwrap();
        let all = PolicyTree {
            feature_names: covariate_names(c.d),
            root: PolicyNode::Leaf {
                treat: true,
                count: 0,
                mean_r0: 0.0,
                mean_r1: 0.0,
            },
        };
        let share = truth.rows.iter().filter(|r| r.optimal_action).count() as f64 / 500.0;
        assert_eq!(policy_agreement(&all, &truth, &cohort), share);
    }

    #[test]
    fn invalid_configs() {
        for c in [
            SynthConfig { n: 10, ..SynthConfig::default() },
            SynthConfig { benefit_size: 1.0, ..SynthConfig::default() },
            SynthConfig { hidden_effect: -1.0, ..SynthConfig::default() },
            SynthConfig { d: 1, ..SynthConfig::default() },
        ] {
            assert!(matches!(generate(&c), Err(SynthError::InvalidConfig(_))));
        }
    }

    #[test]
    fn untreated_cohorts_have_no_treated() {
        let (c, _) = generate(&SynthConfig {
            n: 300,
            assignment: Assignment::Untreated,
            ..SynthConfig::default()
        })
        .unwrap();
        assert_eq!(c.arm_counts().1, 0);
    }
}
