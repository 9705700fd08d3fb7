//! Run configuration file (TOML).
//!
//! ```toml
//! seed = 7
//! mode = "observational"          # or "rct"
//! output_dir = "out"
//!
//! [input]
//! training = "cohort.csv"
//! validation = "external.csv"     # optional; otherwise a held-out split
//! validation_fraction = 0.3
//!
//! [schema]
//! id = "id"
//! treatment = "t"
//! outcome = "y"
//! continuous = ["age", "size"]
//! categorical = ["site"]
//!
//! [buckets]
//! preset = "risk-bands"           # or edges = [0.0, 0.2, 1.0], or count = 5
//! imbalance_threshold = 1.5
//!
//! [matching]
//! enabled = true
//!
//! [escalation]
//! epsilon = 0.1
//! rho_cap = 4.0
//!
//! [tuning]
//! grid = [1.5, 2.0, 2.5]
//! rule = "max-sens-with-spec-floor"   # or "max-sum"
//! floor = 0.5
//! depths = [3, 4]
//! minbuckets = [15, 30]
//!
//! [forest]
//! n_trees = 200
//!
//! [tree]
//! max_depth = 4
//! minbucket = 15
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stratopt::cohort::SchemaMapping;
use stratopt::evaluate::SelectionRule;
use stratopt::pipeline::{Mode, PipelineSettings};
use stratopt::policy_tree::TreeConfig;
use stratopt::risk_forest::ForestConfig;
use stratopt::strata::BucketSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub input: InputConfig,
    pub schema: SchemaMapping,
    #[serde(default)]
    pub buckets: BucketConfig,
    #[serde(default)]
    pub matching: MatchingConfig,
    #[serde(default)]
    pub escalation: EscalationConfig,
    #[serde(default)]
    pub tuning: TuningConfig,
    #[serde(default)]
    pub forest: ForestConfig,
    #[serde(default)]
    pub tree: TreeConfig,
}

fn default_mode() -> Mode {
    Mode::Observational
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub training: PathBuf,
    #[serde(default)]
    pub validation: Option<PathBuf>,
    #[serde(default = "default_fraction")]
    pub validation_fraction: f64,
}

fn default_fraction() -> f64 {
    0.3
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BucketPreset {
    #[default]
    RiskBands,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BucketConfig {
    pub preset: Option<BucketPreset>,
    pub edges: Option<Vec<f64>>,
    /// Equal-width buckets over [0, 1].
    pub count: Option<usize>,
    pub imbalance_threshold: f64,
}

impl Default for BucketConfig {
    fn default() -> Self {
        BucketConfig {
            preset: None,
            edges: None,
            count: None,
            imbalance_threshold: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingConfig {
    pub enabled: bool,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        MatchingConfig { enabled: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EscalationConfig {
    pub epsilon: f64,
    pub rho_cap: f64,
}

impl Default for EscalationConfig {
    fn default() -> Self {
        EscalationConfig {
            epsilon: 0.1,
            rho_cap: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleName {
    #[default]
    MaxSensWithSpecFloor,
    MaxSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningConfig {
    pub grid: Vec<f64>,
    pub rule: RuleName,
    pub floor: f64,
    pub depths: Vec<usize>,
    pub minbuckets: Vec<usize>,
}

impl Default for TuningConfig {
    fn default() -> Self {
        TuningConfig {
            grid: Vec::new(),
            rule: RuleName::default(),
            floor: 0.5,
            depths: Vec::new(),
            minbuckets: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Makes relative paths absolute against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.input.training);
        if let Some(v) = self.input.validation.as_mut() {
            fix(v);
        }
        fix(&mut self.output_dir);
    }

    pub fn bucket_spec(&self) -> Result<BucketSpec, String> {
        let b = &self.buckets;
        let chosen = [b.preset.is_some(), b.edges.is_some(), b.count.is_some()]
            .iter()
            .filter(|&&x| x)
            .count();
        if chosen > 1 {
            return Err("[buckets] takes only one of preset, edges, count".into());
        }
        let spec = if let Some(edges) = &b.edges {
            BucketSpec::new(edges.clone())
        } else if let Some(m) = b.count {
            BucketSpec::equal_width(m)
        } else {
            Ok(BucketSpec::risk_bands())
        };
        spec.map_err(|e| e.to_string())
    }

    pub fn settings(&self) -> Result<PipelineSettings, String> {
        let rule = match self.tuning.rule {
            RuleName::MaxSensWithSpecFloor => SelectionRule::MaxSensWithSpecFloor {
                floor: self.tuning.floor,
            },
            RuleName::MaxSum => SelectionRule::MaxSum,
        };
        if !(0.0..=1.0).contains(&self.tuning.floor) {
            return Err(format!("tuning floor {} outside [0, 1]", self.tuning.floor));
        }
        if !(self.escalation.epsilon > 0.0 && self.escalation.epsilon.is_finite()) {
            return Err(format!("epsilon must be positive, got {}", self.escalation.epsilon));
        }
        if !(self.escalation.rho_cap >= 1.0) {
            return Err(format!("rho_cap must be at least 1, got {}", self.escalation.rho_cap));
        }
        if let Some(r) = self.tuning.grid.iter().find(|r| !(r.is_finite() && **r >= 1.0)) {
            return Err(format!("tuning grid value {r} is below 1"));
        }
        if !(self.buckets.imbalance_threshold >= 1.0) {
            return Err(format!(
                "imbalance_threshold must be at least 1, got {}",
                self.buckets.imbalance_threshold
            ));
        }
        if self.tree.max_depth == 0 || self.tree.minbucket == 0 {
            return Err("tree max_depth and minbucket must be positive".into());
        }
        Ok(PipelineSettings {
            mode: self.mode,
            buckets: self.bucket_spec()?,
            imbalance_threshold: self.buckets.imbalance_threshold,
            matching: self.matching.enabled,
            epsilon: self.escalation.epsilon,
            rho_cap: self.escalation.rho_cap,
            rho_grid: self.tuning.grid.clone(),
            rule,
            forest: self.forest.clone(),
            tree: self.tree.clone(),
            tree_depths: self.tuning.depths.clone(),
            tree_minbuckets: self.tuning.minbuckets.clone(),
            validation_fraction: self.input.validation_fraction,
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [input]
        training = "a.csv"
        [schema]
        treatment = "t"
        outcome = "y"
        continuous = ["x"]
    "#;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        let s = c.settings().unwrap();
        assert_eq!(s.buckets, BucketSpec::risk_bands());
        assert_eq!(s.epsilon, 0.1);
        assert_eq!(s.rho_cap, 4.0);
        assert!(s.matching);
        assert_eq!(s.mode, Mode::Observational);
        assert_eq!(c.output_dir, PathBuf::from("out"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{MINIMAL}\n[escalation]\nepsilonn = 0.2\n");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn bucket_choices() {
        let mut c = RunConfig::from_toml(MINIMAL).unwrap();
        c.buckets.count = Some(4);
        assert_eq!(c.bucket_spec().unwrap().edges(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        c.buckets.edges = Some(vec![0.0, 1.0]);
        assert!(c.bucket_spec().is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = RunConfig::from_toml(MINIMAL).unwrap();
        c.tuning.grid = vec![0.5];
        assert!(c.settings().is_err());
    }

    #[test]
    fn paths_resolve_against_base() {
        let mut c = RunConfig::from_toml(MINIMAL).unwrap();
        c.resolve_paths(Path::new("/data/run"));
        assert_eq!(c.input.training, PathBuf::from("/data/run/a.csv"));
        assert_eq!(c.output_dir, PathBuf::from("/data/run/out"));
    }
}
