//! End-to-end orchestration: normalize, baseline risk, strata, matching,
//! counterfactual models, policy, validation and weight tuning.
//!
//! Each stage is a plain function of the previous stages' outputs so it can
//! be run in memory by [`run`] or one at a time with files in between.
//!
//! Sub-seeds are derived from `settings.seed` by stage label: `split`,
//! `baseline`, `oversample`, `counterfactual` (whose forests further derive
//! `h0` and `h1`).

use serde::{Deserialize, Serialize};

use crate::cohort::{self, Cohort, Normalization, PatientRecord};
use crate::counterfactual::{self, CounterfactualPair, EscalationTrace};
use crate::error::{AtStage, Error, Stage, StageError};
use crate::evaluate::{self, SelectionRule, SpreadReport, TunedPolicy, TuningTable, ValidationResult};
use crate::matcher::{self, MatchedCohort};
use crate::policy_tree::{self, LeafEffect, PolicyTree, TreeConfig};
use crate::risk_forest::{auc_scores, Forest, ForestConfig, TrainingArm};
use crate::seed;
use crate::strata::{self, BalanceReport, BucketSpec};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Observational,
    Rct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    pub mode: Mode,
    pub buckets: BucketSpec,
    /// Arm ratio above which a bucket is flagged.
    pub imbalance_threshold: f64,
    pub matching: bool,
    pub epsilon: f64,
    pub rho_cap: f64,
    /// Weights to tune over; empty skips tuning. Ignored in RCT mode.
    pub rho_grid: Vec<f64>,
    pub rule: SelectionRule,
    /// Forest hyperparameters; the seed field is replaced by derived seeds.
    pub forest: ForestConfig,
    pub tree: TreeConfig,
    /// Tree settings to re-grow the selected policy under, for the
    /// hyperparameter spread report. Both empty skips the report.
    pub tree_depths: Vec<usize>,
    pub tree_minbuckets: Vec<usize>,
    /// Held-out share when no external validation cohort is supplied.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            mode: Mode::Observational,
            buckets: BucketSpec::risk_bands(),
            imbalance_threshold: 1.5,
            matching: true,
            epsilon: 0.1,
            rho_cap: 4.0,
            rho_grid: Vec::new(),
            rule: SelectionRule::default(),
            forest: ForestConfig::default(),
            tree: TreeConfig::default(),
            tree_depths: Vec::new(),
            tree_minbuckets: Vec::new(),
            validation_fraction: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationSource {
    External,
    HeldOut,
}

/// Normalized training and validation cohorts.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub training: Cohort,
    pub validation: Cohort,
    pub normalization: Normalization,
    pub validation_source: ValidationSource,
    /// Treated patients removed from a held-out validation split.
    pub dropped_treated: usize,
}

/// Standardizes with statistics of the training cohort. Without an external
/// cohort, a stratified share of the training cohort is held out and its
/// untreated patients become the validation cohort.
pub fn prepare(raw: &Cohort, external: Option<&Cohort>, settings: &PipelineSettings) -> Result<Prepared> {
    let (train, held, source) = match external {
        Some(ext) => (raw.clone(), ext.clone(), ValidationSource::External),
        None => {
            let (t, v) = cohort::split(raw, settings.validation_fraction, seed::derive(settings.seed, "split"))
                .at(Stage::Normalize)?;
            (t, v, ValidationSource::HeldOut)
        }
    };
    let normalization = cohort::statistics(&train).at(Stage::Normalize)?;
    let training = normalization.apply(&train).at(Stage::Normalize)?;
    let mut validation = normalization.apply(&held).at(Stage::Normalize)?;
    let mut dropped_treated = 0;
    if source == ValidationSource::HeldOut {
        dropped_treated = validation.arm_counts().1;
        validation = validation.filter(|r| !r.treated);
    }
    Ok(Prepared {
        training,
        validation,
        normalization,
        validation_source: source,
        dropped_treated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSummary {
    pub untreated: usize,
    pub treated: usize,
    /// Out-of-bag discrimination on the untreated patients it was fitted to.
    pub untreated_auc: Option<f64>,
    pub mean_risk_untreated: Option<f64>,
    pub mean_risk_treated: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RiskModel {
    pub forest: Forest,
    /// Predicted untreated risk of every training record, in order.
    pub risks: Vec<f64>,
    pub summary: RiskSummary,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Fits the baseline risk model on untreated training patients and predicts
/// everyone's risk without treatment.
pub fn fit_risk(training: &Cohort, settings: &PipelineSettings) -> Result<RiskModel> {
    let untreated = training.filter(|r| !r.treated);
    let config = settings.forest.with_seed(seed::derive(settings.seed, "baseline"));
    let features = untreated.features();
    let labels = untreated.events();
    let (forest, oob) =
        Forest::train_with_oob(&features, &labels, None, &config, TrainingArm::Baseline).at(Stage::Risk)?;
    // Untreated patients get out-of-bag risks so that, like the treated,
    // they are scored by trees that never saw their outcome.
    let mut oob = oob.into_iter();
    let risks = training
        .records
        .iter()
        .map(|r| match r.treated {
            false => Ok(oob.next().expect("one out-of-bag risk per untreated record")),
            true => forest.predict_proba(&r.covariates),
        })
        .collect::<std::result::Result<Vec<f64>, _>>()
        .at(Stage::Risk)?;
    let untreated_risks: Vec<f64> = training
        .records
        .iter()
        .zip(&risks)
        .filter(|(r, _)| !r.treated)
        .map(|(_, &p)| p)
        .collect();
    let summary = RiskSummary {
        untreated: untreated.len(),
        treated: training.len() - untreated.len(),
        untreated_auc: auc_scores(&untreated_risks, &labels).ok(),
        mean_risk_untreated: mean(untreated_risks.iter().copied()),
        mean_risk_treated: mean(
            training
                .records
                .iter()
                .zip(&risks)
                .filter(|(r, _)| r.treated)
                .map(|(_, &p)| p),
        ),
    };
    Ok(RiskModel {
        forest,
        risks,
        summary,
    })
}

/// Bucketed patients. In RCT mode `records` may contain oversampled
/// replicas and omit dropped buckets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strata {
    pub spec: BucketSpec,
    pub records: Vec<PatientRecord>,
    pub risks: Vec<f64>,
    pub buckets: Vec<usize>,
    pub summary: StrataSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrataSummary {
    pub edges: Vec<f64>,
    pub before: BalanceReport,
    /// After merging and oversampling (RCT mode only).
    pub after: Option<BalanceReport>,
    pub merged: Vec<(usize, usize)>,
    pub oversampled: Vec<usize>,
    pub dropped: Vec<usize>,
}

pub fn stratify(records: &[PatientRecord], risks: &[f64], settings: &PipelineSettings) -> Result<Strata> {
    match settings.mode {
        Mode::Observational => {
            let buckets = strata::assign_buckets(risks, &settings.buckets).at(Stage::Stratify)?;
            let before = strata::diagnose(records, &buckets, &settings.buckets, settings.imbalance_threshold)
                .at(Stage::Stratify)?;
            Ok(Strata {
                spec: settings.buckets.clone(),
                records: records.to_vec(),
                risks: risks.to_vec(),
                buckets,
                summary: StrataSummary {
                    edges: settings.buckets.edges().to_vec(),
                    before,
                    after: None,
                    merged: Vec::new(),
                    oversampled: Vec::new(),
                    dropped: Vec::new(),
                },
            })
        }
        Mode::Rct => {
            let r = strata::rebalance(
                records,
                risks,
                &settings.buckets,
                settings.imbalance_threshold,
                seed::derive(settings.seed, "oversample"),
            )
            .at(Stage::Stratify)?;
            Ok(Strata {
                summary: StrataSummary {
                    edges: r.spec.edges().to_vec(),
                    before: r.before,
                    after: Some(r.after),
                    merged: r.merged,
                    oversampled: r.oversampled,
                    dropped: r.dropped,
                },
                spec: r.spec,
                records: r.records,
                risks: r.risks,
                buckets: r.buckets,
            })
        }
    }
}

pub fn match_stage(records: &[PatientRecord], buckets: &[usize], settings: &PipelineSettings) -> Result<MatchedCohort> {
    if settings.matching {
        matcher::match_cohort(records, buckets).at(Stage::Match)
    } else {
        MatchedCohort::unmatched(records.to_vec(), buckets.to_vec()).at(Stage::Match)
    }
}

fn counterfactual_forest(settings: &PipelineSettings) -> ForestConfig {
    settings.forest.with_seed(seed::derive(settings.seed, "counterfactual"))
}

/// Observational mode escalates the weight; RCT mode fits once at weight 1.
pub fn counterfactual_stage(
    matched: &MatchedCohort,
    settings: &PipelineSettings,
) -> Result<(CounterfactualPair, EscalationTrace)> {
    let config = counterfactual_forest(settings);
    match settings.mode {
        Mode::Observational => counterfactual::escalate(matched, settings.epsilon, settings.rho_cap, &config),
        Mode::Rct => counterfactual::fixed(matched, 1.0, &config),
    }
    .at(Stage::Counterfactual)
}

pub fn rewards_stage(pair: &CounterfactualPair, matched: &MatchedCohort) -> Result<Vec<(f64, f64)>> {
    counterfactual::rewards(pair, &matched.records).at(Stage::Counterfactual)
}

pub fn policy_stage(
    matched: &MatchedCohort,
    rewards: &[(f64, f64)],
    feature_names: &[String],
    settings: &PipelineSettings,
) -> Result<(PolicyTree, Vec<LeafEffect>)> {
    let features = matched.features();
    let tree = policy_tree::train_policy(&features, rewards, feature_names, &settings.tree).at(Stage::Policy)?;
    let effects = tree.leaf_effects(&features, rewards).at(Stage::Policy)?;
    Ok((tree, effects))
}

pub fn validate_stage(tree: &PolicyTree, validation: &Cohort) -> Result<ValidationResult> {
    evaluate::validate(tree, &validation.records).at(Stage::Validate)
}

/// Outcome of the tuning stage.
#[derive(Debug, Clone)]
pub struct Tuned {
    pub table: TuningTable,
    pub selected: TunedPolicy,
    pub spread: Option<SpreadReport>,
}

/// Runs the weight grid (observational mode with a nonempty grid only).
pub fn tune_stage(
    matched: &MatchedCohort,
    validation: &Cohort,
    feature_names: &[String],
    settings: &PipelineSettings,
) -> Result<Option<Tuned>> {
    if settings.mode == Mode::Rct || settings.rho_grid.is_empty() {
        return Ok(None);
    }
    let (table, policies) = evaluate::tune_weight(
        matched,
        &validation.records,
        feature_names,
        &settings.rho_grid,
        &settings.tree,
        &counterfactual_forest(settings),
        settings.rule,
    )
    .at(Stage::Tune)?;
    let selected = policies
        .into_iter()
        .find(|p| p.pair.rho == table.selected_rho)
        .ok_or_else(|| Error::new(Stage::Tune, StageError::Data("selected weight missing from grid".into())))?;
    let spread = if settings.tree_depths.is_empty() && settings.tree_minbuckets.is_empty() {
        None
    } else {
        let depths = if settings.tree_depths.is_empty() {
            vec![settings.tree.max_depth]
        } else {
            settings.tree_depths.clone()
        };
        let minbuckets = if settings.tree_minbuckets.is_empty() {
            vec![settings.tree.minbucket]
        } else {
            settings.tree_minbuckets.clone()
        };
        Some(
            evaluate::hyperparameter_spread(&selected, matched, &validation.records, &depths, &minbuckets, &settings.tree)
                .at(Stage::Tune)?,
        )
    };
    Ok(Some(Tuned {
        table,
        selected,
        spread,
    }))
}

/// Everything an in-memory run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub prepared: Prepared,
    pub risk: RiskModel,
    pub strata: Strata,
    pub matched: MatchedCohort,
    pub pair: CounterfactualPair,
    pub trace: EscalationTrace,
    pub rewards: Vec<(f64, f64)>,
    pub tree: PolicyTree,
    pub leaf_effects: Vec<LeafEffect>,
    pub validation: ValidationResult,
    pub tuned: Option<Tuned>,
}

impl RunOutcome {
    /// The tuned policy when tuning ran, else the policy at the escalation's
    /// terminal weight.
    pub fn final_tree(&self) -> &PolicyTree {
        self.tuned.as_ref().map_or(&self.tree, |t| &t.selected.tree)
    }
}

pub fn run(raw: &Cohort, external: Option<&Cohort>, settings: &PipelineSettings) -> Result<RunOutcome> {
    let prepared = prepare(raw, external, settings)?;
    let names = prepared.training.covariate_names();
    let risk = fit_risk(&prepared.training, settings)?;
    let strata = stratify(&prepared.training.records, &risk.risks, settings)?;
    let matched = match_stage(&strata.records, &strata.buckets, settings)?;
    let (pair, trace) = counterfactual_stage(&matched, settings)?;
    let rewards = rewards_stage(&pair, &matched)?;
    let (tree, leaf_effects) = policy_stage(&matched, &rewards, &names, settings)?;
    let validation = validate_stage(&tree, &prepared.validation)?;
    let tuned = tune_stage(&matched, &prepared.validation, &names, settings)?;
    Ok(RunOutcome {
        prepared,
        risk,
        strata,
        matched,
        pair,
        trace,
        rewards,
        tree,
        leaf_effects,
        validation,
        tuned,
    })
}
