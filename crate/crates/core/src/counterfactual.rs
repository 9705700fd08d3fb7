//! Counterfactual outcome models and the cost-sensitive correction for
//! unobserved confounding.
//!
//! `h0` is fit on the matched untreated arm, `h1` on the matched treated arm
//! with weight `rho` on treated patients without an event. Both predict event
//! probability, so lower is better. While the treated model's mean risk over
//! all matched patients exceeds the untreated model's, `rho` is raised by a
//! fixed step and `h1` refit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::PatientRecord;
use crate::matcher::{Arm, MatchedCohort};
use crate::risk_forest::{Forest, ForestConfig, ForestError, TrainingArm};
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum CounterfactualError {
    #[error("{arm:?} arm has a single outcome class")]
    SingleClass { arm: Arm },
    #[error("rho must be finite and at least 1, got {0}")]
    InvalidRho(f64),
    #[error("epsilon must be finite and positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("{arm:?} arm model: {source}")]
    Forest {
        arm: Arm,
        #[source]
        source: ForestError,
    },
    #[error(transparent)]
    Predict(#[from] ForestError),
}

pub type Result<T, E = CounterfactualError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualPair {
    pub h0: Forest,
    pub h1: Forest,
    pub rho: f64,
    /// Mean `h0` prediction over all matched patients.
    pub w_hat_0: f64,
    /// Mean `h1` prediction over all matched patients.
    pub w_hat_1: f64,
}

impl CounterfactualPair {
    /// `w_hat_1 - w_hat_0`; positive values are the minimum confounding bias
    /// left in the treated arm.
    pub fn gap(&self) -> f64 {
        self.w_hat_1 - self.w_hat_0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    RhoCap,
    AlreadyBalanced,
    /// `rho` was held fixed (randomized-trial mode) and the treated model
    /// still carries the higher mean risk.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub rho: f64,
    pub w_hat_0: f64,
    pub w_hat_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscalationTrace {
    pub steps: Vec<TraceStep>,
    pub terminal_rho: f64,
    pub reason: Termination,
}

impl EscalationTrace {
    /// CSV with columns `rho,w_hat_0,w_hat_1`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["rho", "w_hat_0", "w_hat_1"])?;
        for s in &self.steps {
            w.write_record([s.rho.to_string(), s.w_hat_0.to_string(), s.w_hat_1.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Number of steps where `w_hat_1` rose by more than `tol`.
    pub fn increases(&self, tol: f64) -> usize {
        self.steps.windows(2).filter(|w| w[1].w_hat_1 > w[0].w_hat_1 + tol).count()
    }
}

fn arm_data(records: &[PatientRecord], treated: bool) -> (Vec<Vec<f64>>, Vec<bool>) {
    records
        .iter()
        .filter(|r| r.treated == treated)
        .map(|r| (r.covariates.clone(), r.event))
        .unzip()
}

fn fit_arm(
    features: &[Vec<f64>],
    labels: &[bool],
    weights: Option<&[f64]>,
    config: &ForestConfig,
    arm: Arm,
) -> Result<Forest> {
    let tag = match arm {
        Arm::Untreated => TrainingArm::Untreated,
        Arm::Treated => TrainingArm::Treated,
    };
    Forest::train(features, labels, weights, config, tag).map_err(|source| match source {
        ForestError::SingleClass => CounterfactualError::SingleClass { arm },
        source => CounterfactualError::Forest { arm, source },
    })
}

fn mean_prediction(forest: &Forest, records: &[PatientRecord]) -> Result<f64> {
    let mut total = 0.0;
    for r in records {
        total += forest.predict_proba(&r.covariates)?;
    }
    Ok(total / records.len() as f64)
}

/// Fits the treated-arm model at weight `rho`. The forest seed does not depend
/// on `rho`, so successive refits differ only through the weights.
pub(crate) fn fit_treated(
    records: &[PatientRecord],
    rho: f64,
    config: &ForestConfig,
) -> Result<(Forest, f64)> {
    let (x1, y1) = arm_data(records, true);
    let weights: Vec<f64> = y1.iter().map(|&event| if event { 1.0 } else { rho }).collect();
    let h1 = fit_arm(&x1, &y1, Some(&weights), &config.with_seed(seed::derive(config.seed, "h1")), Arm::Treated)?;
    let w_hat_1 = mean_prediction(&h1, records)?;
    Ok((h1, w_hat_1))
}

pub(crate) fn fit_untreated(records: &[PatientRecord], config: &ForestConfig) -> Result<(Forest, f64)> {
    let (x0, y0) = arm_data(records, false);
    let h0 = fit_arm(&x0, &y0, None, &config.with_seed(seed::derive(config.seed, "h0")), Arm::Untreated)?;
    let w_hat_0 = mean_prediction(&h0, records)?;
    Ok((h0, w_hat_0))
}

fn check_rho(rho: f64) -> Result<()> {
    if rho.is_finite() && rho >= 1.0 {
        Ok(())
    } else {
        Err(CounterfactualError::InvalidRho(rho))
    }
}

pub fn train_pair(matched: &MatchedCohort, rho: f64, config: &ForestConfig) -> Result<CounterfactualPair> {
    check_rho(rho)?;
    let (h0, w_hat_0) = fit_untreated(&matched.records, config)?;
    let (h1, w_hat_1) = fit_treated(&matched.records, rho, config)?;
    Ok(CounterfactualPair {
        h0,
        h1,
        rho,
        w_hat_0,
        w_hat_1,
    })
}

/// `1 + k * epsilon`, rounded to 1e-9 so trace values print cleanly.
fn rho_at(step: usize, epsilon: f64) -> f64 {
    ((1.0 + step as f64 * epsilon) * 1e9).round() / 1e9
}

/// The escalation loop, independent of how a pair is produced. `fit` returns
/// the fitted value with its `(w_hat_0, w_hat_1)`.
pub fn escalate_with<T>(
    epsilon: f64,
    rho_cap: f64,
    mut fit: impl FnMut(f64) -> Result<(T, f64, f64)>,
) -> Result<(T, EscalationTrace)> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(CounterfactualError::InvalidEpsilon(epsilon));
    }
    check_rho(rho_cap)?;
    let (mut current, w0, w1) = fit(1.0)?;
    let mut steps = vec![TraceStep {
        rho: 1.0,
        w_hat_0: w0,
        w_hat_1: w1,
    }];
    if w1 <= w0 {
        return Ok((
            current,
            EscalationTrace {
                steps,
                terminal_rho: 1.0,
                reason: Termination::AlreadyBalanced,
            },
        ));
    }
    let mut step = 1;
    let reason = loop {
        let rho = rho_at(step, epsilon);
        if rho > rho_cap + 1e-9 {
            break Termination::RhoCap;
        }
        let (next, w0, w1) = fit(rho)?;
        current = next;
        steps.push(TraceStep {
            rho,
            w_hat_0: w0,
            w_hat_1: w1,
        });
        if w1 <= w0 {
            break Termination::Converged;
        }
        step += 1;
    };
    let terminal_rho = steps.last().map(|s| s.rho).unwrap_or(1.0);
    Ok((
        current,
        EscalationTrace {
            steps,
            terminal_rho,
            reason,
        },
    ))
}

/// Raises `rho` from 1 in steps of `epsilon` until the treated model's mean
/// risk no longer exceeds the untreated model's, or `rho_cap` is reached.
pub fn escalate(
    matched: &MatchedCohort,
    epsilon: f64,
    rho_cap: f64,
    config: &ForestConfig,
) -> Result<(CounterfactualPair, EscalationTrace)> {
    let (h0, w_hat_0) = fit_untreated(&matched.records, config)?;
    let (h1, trace) = escalate_with(epsilon, rho_cap, |rho| {
        let (h1, w_hat_1) = fit_treated(&matched.records, rho, config)?;
        Ok(((h1, rho), w_hat_0, w_hat_1))
    })?;
    let (h1, rho) = h1;
    let w_hat_1 = trace.steps.last().map(|s| s.w_hat_1).unwrap_or(f64::NAN);
    Ok((
        CounterfactualPair {
            h0,
            h1,
            rho,
            w_hat_0,
            w_hat_1,
        },
        trace,
    ))
}

/// Fits at a fixed `rho` without escalating, reporting the single step.
pub fn fixed(
    matched: &MatchedCohort,
    rho: f64,
    config: &ForestConfig,
) -> Result<(CounterfactualPair, EscalationTrace)> {
    let pair = train_pair(matched, rho, config)?;
    let reason = if pair.w_hat_1 <= pair.w_hat_0 {
        Termination::AlreadyBalanced
    } else {
        Termination::Fixed
    };
    let trace = EscalationTrace {
        steps: vec![TraceStep {
            rho,
            w_hat_0: pair.w_hat_0,
            w_hat_1: pair.w_hat_1,
        }],
        terminal_rho: rho,
        reason,
    };
    Ok((pair, trace))
}

/// Per-record `(r0, r1)`: predicted event probability without and with
/// treatment.
pub fn rewards(pair: &CounterfactualPair, records: &[PatientRecord]) -> Result<Vec<(f64, f64)>> {
    records
        .iter()
        .map(|r| {
            Ok((
                pair.h0.predict_proba(&r.covariates)?,
                pair.h1.predict_proba(&r.covariates)?,
            ))
        })
        .collect()
}
