//! Baseline-risk buckets: assignment, arm-balance diagnosis, and the
//! randomized-trial repair path (merge imbalanced neighbours, oversample the
//! scarce arm).
//!
//! Buckets are numbered from 1. Bucket `k` covers `[edges[k-1], edges[k])`,
//! except the last, which is closed on the right.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::PatientRecord;
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum StrataError {
    #[error("invalid bucket edges: {0}")]
    InvalidEdges(String),
    #[error("risk {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("buckets {from} and {to} are not adjacent")]
    NotAdjacent { from: usize, to: usize },
    #[error("bucket {bucket} does not exist (have {m})")]
    NoSuchBucket { bucket: usize, m: usize },
    #[error("cannot oversample: an arm is empty")]
    EmptyArm,
    #[error("target {target} is below the largest arm size {largest}")]
    TargetTooSmall { target: usize, largest: usize },
    #[error("imbalance threshold must be at least 1, got {0}")]
    InvalidThreshold(f64),
    #[error("{records} records but {values} risks/buckets")]
    LengthMismatch { records: usize, values: usize },
}

pub type Result<T, E = StrataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BucketSpec {
    edges: Vec<f64>,
}

impl TryFrom<Vec<f64>> for BucketSpec {
    type Error = StrataError;
    fn try_from(edges: Vec<f64>) -> Result<Self> {
        BucketSpec::new(edges)
    }
}

impl From<BucketSpec> for Vec<f64> {
    fn from(spec: BucketSpec) -> Self {
        spec.edges
    }
}

impl BucketSpec {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(StrataError::InvalidEdges("need at least two edges".into()));
        }
        if edges[0] != 0.0 || edges[edges.len() - 1] != 1.0 {
            return Err(StrataError::InvalidEdges("edges must start at 0 and end at 1".into()));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(StrataError::InvalidEdges("edges must be strictly increasing".into()));
        }
        Ok(BucketSpec { edges })
    }

    /// `m` buckets of equal width.
    pub fn equal_width(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(StrataError::InvalidEdges("need at least one bucket".into()));
        }
        let mut edges: Vec<f64> = (0..m).map(|k| k as f64 / m as f64).collect();
        edges.push(1.0);
        BucketSpec::new(edges)
    }

    /// Ten-point bands up to 50% risk, then one band for the rest.
    pub fn risk_bands() -> Self {
        BucketSpec::new(vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 1.0]).expect("valid preset")
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Number of buckets.
    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `(lower, upper)` edges of bucket `k`.
    pub fn bounds(&self, bucket: usize) -> (f64, f64) {
        (self.edges[bucket - 1], self.edges[bucket])
    }

    pub fn assign(&self, risk: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&risk) {
            return Err(StrataError::OutOfRange(risk));
        }
        let interior = &self.edges[1..self.edges.len() - 1];
        Ok(interior.partition_point(|&e| e <= risk) + 1)
    }

    /// Removes the edge between two adjacent buckets. Profiles assigned under
    /// the old spec must be re-assigned.
    pub fn merge(&self, from: usize, to: usize) -> Result<BucketSpec> {
        let m = self.len();
        for bucket in [from, to] {
            if bucket == 0 || bucket > m {
                return Err(StrataError::NoSuchBucket { bucket, m });
            }
        }
        if to != from + 1 {
            return Err(StrataError::NotAdjacent { from, to });
        }
        let mut edges = self.edges.clone();
        edges.remove(from);
        BucketSpec::new(edges)
    }
}

pub fn assign_buckets(risks: &[f64], spec: &BucketSpec) -> Result<Vec<usize>> {
    risks.iter().map(|&r| spec.assign(r)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskProfile {
    pub id: String,
    pub risk: f64,
    pub bucket: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketBalance {
    pub bucket: usize,
    pub lower: f64,
    pub upper: f64,
    pub untreated: usize,
    pub treated: usize,
    pub ratio: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub threshold: f64,
    pub buckets: Vec<BucketBalance>,
}

impl BalanceReport {
    pub fn flagged(&self) -> Vec<usize> {
        self.buckets.iter().filter(|b| b.flagged).map(|b| b.bucket).collect()
    }

    pub fn total(&self) -> usize {
        self.buckets.iter().map(|b| b.treated + b.untreated).sum()
    }
}

/// Counts each arm per bucket. A bucket is flagged when its arm ratio
/// `max / max(1, min)` exceeds `threshold` or one arm is empty; buckets with
/// no patients at all are not flagged.
pub fn diagnose(
    records: &[PatientRecord],
    buckets: &[usize],
    spec: &BucketSpec,
    threshold: f64,
) -> Result<BalanceReport> {
    if !(threshold >= 1.0) {
        return Err(StrataError::InvalidThreshold(threshold));
    }
    if records.len() != buckets.len() {
        return Err(StrataError::LengthMismatch {
            records: records.len(),
            values: buckets.len(),
        });
    }
    let m = spec.len();
    let mut counts = vec![(0usize, 0usize); m];
    for (r, &b) in records.iter().zip(buckets) {
        if b == 0 || b > m {
            return Err(StrataError::NoSuchBucket { bucket: b, m });
        }
        if r.treated {
            counts[b - 1].1 += 1;
        } else {
            counts[b - 1].0 += 1;
        }
    }
    let buckets = counts
        .iter()
        .enumerate()
        .map(|(i, &(untreated, treated))| {
            let (lower, upper) = spec.bounds(i + 1);
            let small = untreated.min(treated);
            let ratio = untreated.max(treated) as f64 / small.max(1) as f64;
            BucketBalance {
                bucket: i + 1,
                lower,
                upper,
                untreated,
                treated,
                ratio,
                flagged: untreated + treated > 0 && (small == 0 || ratio > threshold),
            }
        })
        .collect();
    Ok(BalanceReport { threshold, buckets })
}

/// Brings each arm up to `target_per_arm` records by drawing replicas with
/// replacement from that arm. Originals come first, in input order; replica
/// ids are `<id>#<n>` with `n` counting copies of that original from 1.
pub fn oversample(
    records: &[PatientRecord],
    target_per_arm: usize,
    seed: u64,
) -> Result<Vec<PatientRecord>> {
    let untreated: Vec<&PatientRecord> = records.iter().filter(|r| !r.treated).collect();
    let treated: Vec<&PatientRecord> = records.iter().filter(|r| r.treated).collect();
    if untreated.is_empty() || treated.is_empty() {
        return Err(StrataError::EmptyArm);
    }
    let largest = untreated.len().max(treated.len());
    if target_per_arm < largest {
        return Err(StrataError::TargetTooSmall {
            target: target_per_arm,
            largest,
        });
    }
    let mut rng = seed::rng(seed);
    let mut out = records.to_vec();
    let mut copies: BTreeMap<&str, usize> = BTreeMap::new();
    for arm in [&untreated, &treated] {
        for _ in arm.len()..target_per_arm {
            let pick = arm[rng.random_range(0..arm.len())];
            let n = copies.entry(pick.id.as_str()).or_insert(0);
            *n += 1;
            out.push(PatientRecord {
                id: format!("{}#{}", pick.id, n),
                ..pick.clone()
            });
        }
    }
    Ok(out)
}

/// Outcome of the randomized-trial repair path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rebalanced {
    pub spec: BucketSpec,
    pub records: Vec<PatientRecord>,
    pub risks: Vec<f64>,
    pub buckets: Vec<usize>,
    /// Original bucket ranges `(first, last)` that were merged.
    pub merged: Vec<(usize, usize)>,
    /// Buckets (under the merged spec) that were oversampled.
    pub oversampled: Vec<usize>,
    /// Buckets dropped because one arm was empty.
    pub dropped: Vec<usize>,
    pub before: BalanceReport,
    pub after: BalanceReport,
}

/// Diagnose, merge each run of adjacent flagged buckets into one, then
/// oversample the scarce arm of every bucket still flagged.
pub fn rebalance(
    records: &[PatientRecord],
    risks: &[f64],
    spec: &BucketSpec,
    threshold: f64,
    seed: u64,
) -> Result<Rebalanced> {
    if records.len() != risks.len() {
        return Err(StrataError::LengthMismatch {
            records: records.len(),
            values: risks.len(),
        });
    }
    let buckets = assign_buckets(risks, spec)?;
    let before = diagnose(records, &buckets, spec, threshold)?;
    let flagged = before.flagged();

    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &k in &flagged {
        match runs.last_mut() {
            Some(run) if run.1 + 1 == k => run.1 = k,
            _ => runs.push((k, k)),
        }
    }
    runs.retain(|r| r.1 > r.0);
    let mut merged_spec = spec.clone();
    for &(first, last) in runs.iter().rev() {
        for k in (first..last).rev() {
            merged_spec = merged_spec.merge(k, k + 1)?;
        }
    }

    let buckets = assign_buckets(risks, &merged_spec)?;
    let mid = diagnose(records, &buckets, &merged_spec, threshold)?;
    let mut out_records = Vec::with_capacity(records.len());
    let mut out_risks = Vec::with_capacity(records.len());
    let mut out_buckets = Vec::with_capacity(records.len());
    let mut oversampled = Vec::new();
    let mut dropped = Vec::new();
    for balance in &mid.buckets {
        let k = balance.bucket;
        let members: Vec<usize> = (0..records.len()).filter(|&i| buckets[i] == k).collect();
        if members.is_empty() {
            continue;
        }
        let group: Vec<PatientRecord> = members.iter().map(|&i| records[i].clone()).collect();
        let group = if balance.flagged {
            if balance.treated == 0 || balance.untreated == 0 {
                dropped.push(k);
                continue;
            }
            oversampled.push(k);
            let target = balance.treated.max(balance.untreated);
            oversample(&group, target, seed::derive(seed, &format!("oversample-{k}")))?
        } else {
            group
        };
        for r in group {
            let base = r.id.split('#').next().unwrap_or(&r.id).to_string();
            let risk = members
                .iter()
                .find(|&&i| records[i].id == base)
                .map(|&i| risks[i])
                .unwrap_or(f64::NAN);
            out_risks.push(risk);
            out_buckets.push(k);
            out_records.push(r);
        }
    }
    let after = diagnose(&out_records, &out_buckets, &merged_spec, threshold)?;
    Ok(Rebalanced {
        spec: merged_spec,
        records: out_records,
        risks: out_risks,
        buckets: out_buckets,
        merged: runs,
        oversampled,
        dropped,
        before,
        after,
    })
}

/// Writes per-bucket arm counts for one or more labelled reports as CSV
/// (`stage,bucket,lower,upper,untreated,treated`).
pub fn write_histogram_csv<W: Write>(reports: &[(&str, &BalanceReport)], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["stage", "bucket", "lower", "upper", "untreated", "treated"])?;
    for (stage, report) in reports {
        for b in &report.buckets {
            w.write_record([
                stage.to_string(),
                b.bucket.to_string(),
                b.lower.to_string(),
                b.upper.to_string(),
                b.untreated.to_string(),
                b.treated.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
