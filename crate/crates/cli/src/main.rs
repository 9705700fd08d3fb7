//! `stratopt`: run the pipeline, one stage at a time or end to end, and
//! generate synthetic cohorts.

mod config;
mod error;
mod report;
mod stages;
mod table;

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stratopt::error::AtStage;
use stratopt::pipeline::Mode;
use stratopt::synthgen::{self, Assignment, SynthConfig};
use stratopt::{seed, Error, Stage};

use crate::config::{RuleName, RunConfig};
use crate::error::{CliError, ErrorReport};
use crate::stages::Context;

/// Environment variable overriding the configured output directory.
const OUTPUT_DIR_ENV: &str = "STRATOPT_OUTPUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "stratopt", version, about = "Treatment policies from observational and trial cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort with known ground truth.
    Simulate(SimulateArgs),
    /// Load, normalize and fit the baseline risk model.
    Risk(RunArgs),
    /// Bucket patients by baseline risk and check arm balance.
    Stratify(RunArgs),
    /// Pair treated and untreated patients within buckets.
    Match(RunArgs),
    /// Fit the counterfactual outcome models and rewards.
    Counterfactual(RunArgs),
    /// Grow the policy tree.
    Policy(RunArgs),
    /// Score the policy on the validation cohort.
    Validate(RunArgs),
    /// Tune the treated-arm weight over a grid.
    Tune(RunArgs),
    /// Run every stage in order.
    Run(RunArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Observational,
    Rct,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RuleArg {
    MaxSensWithSpecFloor,
    MaxSum,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    training: Option<PathBuf>,
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Arm ratio above which a bucket is flagged.
    #[arg(long)]
    threshold: Option<f64>,
    /// Disable within-bucket matching.
    #[arg(long)]
    no_matching: bool,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    rho_cap: Option<f64>,
    /// Comma-separated treated-arm weights to tune over.
    #[arg(long, value_delimiter = ',')]
    rho_grid: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    rule: Option<RuleArg>,
    /// Specificity floor for the default selection rule.
    #[arg(long)]
    floor: Option<f64>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let text = fs::read_to_string(&self.config)
            .map_err(|e| CliError::file(&self.config, e))
            .at(Stage::Config)?;
        let mut cfg = RunConfig::from_toml(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", self.config.display())))
            .at(Stage::Config)?;
        let base = self.config.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            cfg.output_dir = dir.into();
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(p) = &self.training {
            cfg.input.training = p.clone();
        }
        if let Some(p) = &self.validation {
            cfg.input.validation = Some(p.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.mode = match m {
                ModeArg::Observational => Mode::Observational,
                ModeArg::Rct => Mode::Rct,
            };
        }
        if let Some(t) = self.threshold {
            cfg.buckets.imbalance_threshold = t;
        }
        if self.no_matching {
            cfg.matching.enabled = false;
        }
        if let Some(e) = self.epsilon {
            cfg.escalation.epsilon = e;
        }
        if let Some(c) = self.rho_cap {
            cfg.escalation.rho_cap = c;
        }
        if let Some(g) = &self.rho_grid {
            cfg.tuning.grid = g.clone();
        }
        if let Some(r) = self.rule {
            cfg.tuning.rule = match r {
                RuleArg::MaxSensWithSpecFloor => RuleName::MaxSensWithSpecFloor,
                RuleArg::MaxSum => RuleName::MaxSum,
            };
        }
        if let Some(f) = self.floor {
            cfg.tuning.floor = f;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AssignmentArg {
    Observational,
    Rct,
    RctImbalanced,
    Untreated,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Number of covariates.
    #[arg(long, default_value_t = 4)]
    d: usize,
    /// Log-odds effect of the unobserved confounder on baseline risk.
    #[arg(long, default_value_t = 1.0)]
    hidden_effect: f64,
    #[arg(long, value_enum, default_value = "observational")]
    assignment: AssignmentArg,
    /// Risk reduction for patients the planted policy treats.
    #[arg(long, default_value_t = 0.3)]
    benefit_size: f64,
    /// Risk increase from treatment for everyone else.
    #[arg(long, default_value_t = 0.15)]
    harm_size: f64,
    /// Treated share inside the imbalanced band (rct-imbalanced only).
    #[arg(long)]
    treated_share: Option<f64>,
    /// Baseline risk at which the imbalanced band starts (rct-imbalanced only).
    #[arg(long)]
    band_floor: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write an untreated validation cohort of this size.
    #[arg(long)]
    external: Option<usize>,
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
}

fn simulate(args: &SimulateArgs) -> Result<(), Error> {
    let assignment = match args.assignment {
        AssignmentArg::Observational => Assignment::observational(),
        AssignmentArg::Rct => Assignment::Rct,
        AssignmentArg::RctImbalanced => match Assignment::rct_imbalanced() {
            Assignment::RctImbalanced {
                band_floor,
                treated_share,
            } => Assignment::RctImbalanced {
                band_floor: args.band_floor.unwrap_or(band_floor),
                treated_share: args.treated_share.unwrap_or(treated_share),
            },
            other => other,
        },
        AssignmentArg::Untreated => Assignment::Untreated,
    };
    let config = SynthConfig {
        n: args.n,
        d: args.d,
        hidden_effect: args.hidden_effect,
        assignment,
        benefit_size: args.benefit_size,
        harm_size: args.harm_size,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let out = &args.output_dir;
    fs::create_dir_all(out).map_err(|e| CliError::file(out, e)).at(Stage::Write)?;
    let (cohort, truth) = synthgen::generate(&config).at(Stage::Simulate)?;
    write_synthetic(out, "cohort.csv", "truth.csv", &cohort, &truth)?;
    let validation_line = match args.external {
        Some(n) => {
            let ext = SynthConfig {
                n,
                assignment: Assignment::Untreated,
                seed: seed::derive(args.seed, "external"),
                ..config.clone()
            };
            let (cohort, truth) = synthgen::generate(&ext).at(Stage::Simulate)?;
            write_synthetic(out, "external.csv", "external_truth.csv", &cohort, &truth)?;
            "validation = \"external.csv\"\n"
        }
        None => "",
    };
    let continuous = synthgen::covariate_names(args.d)
        .iter()
        .map(|n| format!("\"{n}\""))
        .collect::<Vec<_>>()
        .join(", ");
    let mode = match args.assignment {
        AssignmentArg::Rct | AssignmentArg::RctImbalanced => "rct",
        _ => "observational",
    };
    let run_config = format!(
        "seed = {seed}\nmode = \"{mode}\"\noutput_dir = \"out\"\n\n[input]\ntraining = \"cohort.csv\"\n{validation_line}\n\
         [schema]\nid = \"id\"\ntreatment = \"t\"\noutcome = \"y\"\ncontinuous = [{continuous}]\n",
        seed = args.seed,
    );
    let path = out.join("config.toml");
    fs::write(&path, run_config).map_err(|e| CliError::file(&path, e)).at(Stage::Write)
}

fn write_synthetic(
    out: &Path,
    cohort_name: &str,
    truth_name: &str,
    cohort: &stratopt::cohort::Cohort,
    truth: &synthgen::GroundTruth,
) -> Result<(), Error> {
    let write = || -> Result<(), CliError> {
        let path = out.join(cohort_name);
        let file = File::create(&path).map_err(|e| CliError::file(&path, e))?;
        synthgen::write_cohort_csv(cohort, file).map_err(|e| CliError::file(&path, e))?;
        let path = out.join(truth_name);
        let file = File::create(&path).map_err(|e| CliError::file(&path, e))?;
        truth.write_csv(file).map_err(|e| CliError::file(&path, e))
    };
    write().at(Stage::Write)
}

fn execute(command: &Command) -> Result<(), Error> {
    let (args, stage): (&RunArgs, fn(&Context) -> Result<(), Error>) = match command {
        Command::Simulate(args) => return simulate(args),
        Command::Risk(a) => (a, stages::risk),
        Command::Stratify(a) => (a, stages::stratify),
        Command::Match(a) => (a, stages::match_stage),
        Command::Counterfactual(a) => (a, stages::counterfactual),
        Command::Policy(a) => (a, stages::policy),
        Command::Validate(a) => (a, stages::validate),
        Command::Tune(a) => (a, stages::tune),
        Command::Run(a) => (a, stages::run),
    };
    let ctx = Context::new(args.load()?)?;
    stage(&ctx)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = ErrorReport::from_error(&e);
            let doc = serde_json::json!({ "error": report });
            eprintln!("{doc}");
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}
