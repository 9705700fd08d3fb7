//! Treatment policies from confounded observational or imbalanced randomized
//! cohorts.
//!
//! The pipeline stratifies patients by a baseline risk model fitted on the
//! untreated, matches treated and untreated patients exactly within each
//! risk bucket, fits counterfactual outcome forests for both arms, and raises
//! the weight of event-free treated patients until the treated model no
//! longer predicts more events than the untreated one. The corrected
//! per-patient risks become rewards for a prescriptive policy tree, which is
//! validated on untreated patients by sensitivity and specificity.
//!
//! Data-parallel loops (forest trees, per-bucket matching, split candidates,
//! tuning grid points) run on rayon with the default `parallel` feature and
//! sequentially without it; results are identical either way.

pub mod cohort;
pub mod counterfactual;
pub mod error;
pub mod evaluate;
pub mod matcher;
pub mod par;
pub mod pipeline;
pub mod policy_tree;
pub mod risk_forest;
pub mod seed;
pub mod strata;
pub mod synthgen;

pub use error::{Error, ErrorKind, Stage};
