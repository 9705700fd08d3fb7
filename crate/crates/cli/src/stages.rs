//! File-backed pipeline stages. Each stage reads the previous stages'
//! interchange files from `<output_dir>/work/`, writes its own outputs and
//! adds its section to `report.json`. `run` calls them in order, so a full
//! run and a stage-by-stage run produce identical files.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use stratopt::cohort::{self, Cohort, Covariate, Normalization, SchemaMapping};
use stratopt::error::AtStage;
use stratopt::matcher::MatchedCohort;
use stratopt::pipeline::{self, PipelineSettings};
use stratopt::policy_tree::PolicyTree;
use stratopt::strata;
use stratopt::{Error, Stage};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::report;
use crate::table::{self, Extras};

type Result<T, E = Error> = std::result::Result<T, E>;

const SCHEMA: &str = "schema.json";
const TRAINING: &str = "training.csv";
const VALIDATION: &str = "validation.csv";
const STRATA: &str = "strata.csv";
const MATCHED: &str = "matched.csv";
const REWARDS: &str = "rewards.csv";

pub const NORMALIZATION: &str = "normalization.json";
pub const BUCKETS: &str = "buckets.csv";
pub const MATCHES: &str = "matches.json";
pub const TRACE: &str = "trace.csv";
pub const TREE_JSON: &str = "tree.json";
pub const TREE_DOT: &str = "tree.dot";
pub const TUNING: &str = "tuning.csv";
pub const TUNED_JSON: &str = "tuned_tree.json";
pub const TUNED_DOT: &str = "tuned_tree.dot";

/// A resolved configuration and the directories it writes to.
pub struct Context {
    pub config: RunConfig,
    pub settings: PipelineSettings,
    pub out: PathBuf,
}

impl Context {
    pub fn new(config: RunConfig) -> Result<Self> {
        let settings = config.settings().map_err(CliError::Config).at(Stage::Config)?;
        let out = config.output_dir.clone();
        Ok(Context { config, settings, out })
    }

    fn output(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn work(&self, name: &str) -> PathBuf {
        self.out.join("work").join(name)
    }

    fn names(&self, stage: Stage) -> Result<Vec<String>> {
        let schema: Vec<Covariate> = read_json(&self.work(SCHEMA)).at(stage)?;
        Ok(schema.into_iter().map(|c| c.name).collect())
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let file = File::open(path).map_err(|e| CliError::file(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| CliError::file(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::file(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::file(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::file(path, e))
}

/// Writes a CSV produced by `f` into `path`.
fn write_csv<E: std::fmt::Display>(
    path: &Path,
    f: impl FnOnce(File) -> std::result::Result<(), E>,
) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::file(path, e))?;
    f(file).map_err(|e| CliError::file(path, e))
}

fn load(path: &Path, mapping: &SchemaMapping, schema: Option<&[Covariate]>) -> Result<Cohort> {
    let file = File::open(path).map_err(|e| CliError::file(path, e)).at(Stage::Load)?;
    let reader = std::io::BufReader::new(file);
    match schema {
        None => cohort::load_cohort(reader, mapping),
        Some(s) => cohort::load_cohort_with_schema(reader, mapping, s),
    }
    .map_err(|e| CliError::file(path, e))
    .at(Stage::Load)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn strings<T: ToString>(values: &[T]) -> Vec<String> {
    values.iter().map(ToString::to_string).collect()
}

/// Loads and normalizes the cohorts and fits the baseline risk model.
/// Starts a fresh report.
pub fn risk(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    fs::create_dir_all(ctx.out.join("work"))
        .map_err(|e| CliError::file(&ctx.out, e))
        .at(Stage::Write)?;
    let raw = load(&cfg.input.training, &cfg.schema, None)?;
    let external = match &cfg.input.validation {
        Some(path) => Some(load(path, &cfg.schema, Some(&raw.schema))?),
        None => None,
    };
    let prepared = pipeline::prepare(&raw, external.as_ref(), &ctx.settings)?;
    let model = pipeline::fit_risk(&prepared.training, &ctx.settings)?;
    let names = prepared.training.covariate_names();

    let write = || -> Result<(), CliError> {
        write_json(&ctx.work(SCHEMA), &prepared.training.schema)?;
        write_json(&ctx.output(NORMALIZATION), &prepared.normalization)?;
        table::write(
            &ctx.work(TRAINING),
            &names,
            &prepared.training.records,
            &vec![("risk".into(), strings(&model.risks))],
        )?;
        table::write(&ctx.work(VALIDATION), &names, &prepared.validation.records, &Vec::new())?;
        let (untreated, treated) = prepared.training.arm_counts();
        report::reset(
            &ctx.out,
            vec![
                ("config", serde_json::to_value(&ctx.settings).expect("settings serialize")),
                (
                    "input",
                    json!({
                        "training_file": file_name(&cfg.input.training),
                        "validation_file": cfg.input.validation.as_deref().map(file_name),
                        "validation_source": prepared.validation_source,
                        "covariates": names,
                        "training_records": prepared.training.len(),
                        "training_untreated": untreated,
                        "training_treated": treated,
                        "validation_records": prepared.validation.len(),
                        "validation_treated_dropped": prepared.dropped_treated,
                    }),
                ),
                ("risk", serde_json::to_value(&model.summary).expect("summary serializes")),
            ],
        )
    };
    write().at(Stage::Write)
}

/// Assigns risk buckets and diagnoses (observational) or repairs (RCT)
/// arm imbalance.
pub fn stratify(ctx: &Context) -> Result<()> {
    let names = ctx.names(Stage::Stratify)?;
    let training = table::read(&ctx.work(TRAINING), &names).at(Stage::Stratify)?;
    let risks: Vec<f64> = training.column("risk").at(Stage::Stratify)?;
    let s = pipeline::stratify(&training.records, &risks, &ctx.settings)?;
    let write = || -> Result<(), CliError> {
        table::write(
            &ctx.work(STRATA),
            &names,
            &s.records,
            &vec![("risk".into(), strings(&s.risks)), ("bucket".into(), strings(&s.buckets))],
        )?;
        let mut reports = vec![("before", &s.summary.before)];
        if let Some(after) = &s.summary.after {
            reports.push(("after", after));
        }
        write_csv(&ctx.output(BUCKETS), |f| strata::write_histogram_csv(&reports, f))?;
        report::set(&ctx.out, "strata", &s.summary)
    };
    write().at(Stage::Write)
}

/// Pairs patients within each bucket (or passes them through when
/// matching is disabled).
pub fn match_stage(ctx: &Context) -> Result<()> {
    let names = ctx.names(Stage::Match)?;
    let strata = table::read(&ctx.work(STRATA), &names).at(Stage::Match)?;
    let buckets: Vec<usize> = strata.column("bucket").at(Stage::Match)?;
    let matched = pipeline::match_stage(&strata.records, &buckets, &ctx.settings)?;
    let write = || -> Result<(), CliError> {
        table::write(
            &ctx.work(MATCHED),
            &names,
            &matched.records,
            &vec![("bucket".into(), strings(&matched.buckets))],
        )?;
        write_json(
            &ctx.output(MATCHES),
            &json!({ "plans": matched.plans, "warnings": matched.warnings }),
        )?;
        let (untreated, treated) = matched.arm_counts();
        report::set(
            &ctx.out,
            "matching",
            json!({
                "enabled": ctx.settings.matching,
                "input_records": strata.records.len(),
                "records": matched.len(),
                "untreated": untreated,
                "treated": treated,
                "matched_buckets": matched.plans.len(),
                "total_objective": matched.total_objective(),
                "warnings": matched.warnings,
            }),
        )
    };
    write().at(Stage::Write)
}

fn read_matched(ctx: &Context, names: &[String], stage: Stage) -> Result<MatchedCohort> {
    let t = table::read(&ctx.work(MATCHED), names).at(stage)?;
    let buckets: Vec<usize> = t.column("bucket").at(stage)?;
    MatchedCohort::unmatched(t.records, buckets).at(stage)
}

/// Fits the counterfactual models (escalating the weight in observational
/// mode) and computes per-patient rewards.
pub fn counterfactual(ctx: &Context) -> Result<()> {
    let names = ctx.names(Stage::Counterfactual)?;
    let matched = read_matched(ctx, &names, Stage::Counterfactual)?;
    let (pair, trace) = pipeline::counterfactual_stage(&matched, &ctx.settings)?;
    let rewards = pipeline::rewards_stage(&pair, &matched)?;
    let write = || -> Result<(), CliError> {
        write_csv(&ctx.output(TRACE), |f| trace.write_csv(f))?;
        let r0: Vec<f64> = rewards.iter().map(|r| r.0).collect();
        let r1: Vec<f64> = rewards.iter().map(|r| r.1).collect();
        let extras: Extras = vec![("r0".into(), strings(&r0)), ("r1".into(), strings(&r1))];
        table::write(&ctx.work(REWARDS), &names, &matched.records, &extras)?;
        report::set(
            &ctx.out,
            "counterfactual",
            json!({
                "rho": pair.rho,
                "w_hat_0": pair.w_hat_0,
                "w_hat_1": pair.w_hat_1,
                "reason": trace.reason,
                "steps": trace.steps.len(),
            }),
        )
    };
    write().at(Stage::Write)
}

fn tree_summary(tree: &PolicyTree, features: &[Vec<f64>], rewards: &[(f64, f64)], stage: Stage) -> Result<serde_json::Value> {
    Ok(json!({
        "depth": tree.depth(),
        "leaves": tree.leaf_count(),
        "objective": tree.objective(features, rewards).at(stage)?,
        "leaf_effects": tree.leaf_effects(features, rewards).at(stage)?,
    }))
}

/// Grows the policy tree on the rewards.
pub fn policy(ctx: &Context) -> Result<()> {
    let names = ctx.names(Stage::Policy)?;
    let t = table::read(&ctx.work(REWARDS), &names).at(Stage::Policy)?;
    let r0: Vec<f64> = t.column("r0").at(Stage::Policy)?;
    let r1: Vec<f64> = t.column("r1").at(Stage::Policy)?;
    let rewards: Vec<(f64, f64)> = r0.into_iter().zip(r1).collect();
    let n = t.records.len();
    let matched = MatchedCohort::unmatched(t.records, vec![0; n]).at(Stage::Policy)?;
    let (tree, _) = pipeline::policy_stage(&matched, &rewards, &names, &ctx.settings)?;
    let summary = tree_summary(&tree, &matched.features(), &rewards, Stage::Policy)?;
    let normalization: Normalization = read_json(&ctx.output(NORMALIZATION)).at(Stage::Policy)?;
    let write = || -> Result<(), CliError> {
        write_json(&ctx.output(TREE_JSON), &tree)?;
        write_text(&ctx.output(TREE_DOT), &tree.to_dot(Some(&normalization)))?;
        report::set(&ctx.out, "policy", summary)
    };
    write().at(Stage::Write)
}

fn read_validation(ctx: &Context, names: &[String], stage: Stage) -> Result<Cohort> {
    let schema: Vec<Covariate> = read_json(&ctx.work(SCHEMA)).at(stage)?;
    let t = table::read(&ctx.work(VALIDATION), names).at(stage)?;
    Cohort::new(schema, t.records).at(stage)
}

/// Scores the policy tree on the untreated validation cohort.
pub fn validate(ctx: &Context) -> Result<()> {
    let names = ctx.names(Stage::Validate)?;
    let tree: PolicyTree = read_json(&ctx.output(TREE_JSON)).at(Stage::Validate)?;
    let validation = read_validation(ctx, &names, Stage::Validate)?;
    let result = pipeline::validate_stage(&tree, &validation)?;
    report::set(&ctx.out, "validation", result).at(Stage::Write)
}

/// Sweeps the weight grid and keeps the policy the selection rule prefers.
/// Without a grid (or in RCT mode) writes a header-only `tuning.csv`.
pub fn tune(ctx: &Context) -> Result<()> {
    let names = ctx.names(Stage::Tune)?;
    let matched = read_matched(ctx, &names, Stage::Tune)?;
    let validation = read_validation(ctx, &names, Stage::Tune)?;
    let tuned = pipeline::tune_stage(&matched, &validation, &names, &ctx.settings)?;
    let Some(tuned) = tuned else {
        let reason = match ctx.settings.mode {
            pipeline::Mode::Rct => "rct_mode",
            pipeline::Mode::Observational => "empty_grid",
        };
        let write = || -> Result<(), CliError> {
            write_text(&ctx.output(TUNING), "weight,sensitivity,specificity\n")?;
            for stale in [TUNED_JSON, TUNED_DOT] {
                let p = ctx.output(stale);
                if p.exists() {
                    fs::remove_file(&p).map_err(|e| CliError::file(&p, e))?;
                }
            }
            report::set(&ctx.out, "tuning", json!({ "skipped": reason }))
        };
        return write().at(Stage::Write);
    };
    let selected = &tuned.selected;
    let mut summary = tree_summary(&selected.tree, &matched.features(), &selected.rewards, Stage::Tune)?;
    summary["rho"] = json!(selected.pair.rho);
    summary["w_hat_0"] = json!(selected.pair.w_hat_0);
    summary["w_hat_1"] = json!(selected.pair.w_hat_1);
    summary["validation"] = serde_json::to_value(&selected.validation).expect("validation serializes");
    let normalization: Normalization = read_json(&ctx.output(NORMALIZATION)).at(Stage::Tune)?;
    let write = || -> Result<(), CliError> {
        write_csv(&ctx.output(TUNING), |f| tuned.table.write_csv(f))?;
        write_json(&ctx.output(TUNED_JSON), &selected.tree)?;
        write_text(&ctx.output(TUNED_DOT), &selected.tree.to_dot(Some(&normalization)))?;
        report::set(
            &ctx.out,
            "tuning",
            json!({
                "table": tuned.table,
                "selected": summary,
                "spread": tuned.spread,
            }),
        )
    };
    write().at(Stage::Write)
}

/// Every stage in order.
pub fn run(ctx: &Context) -> Result<()> {
    risk(ctx)?;
    stratify(ctx)?;
    match_stage(ctx)?;
    counterfactual(ctx)?;
    policy(ctx)?;
    validate(ctx)?;
    tune(ctx)
}
