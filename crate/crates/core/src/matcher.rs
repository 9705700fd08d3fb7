//! Exact within-bucket matching.
//!
//! Every patient of the smaller arm is paired with a distinct patient of the
//! larger arm so that the total squared Euclidean covariate distance is
//! minimal. This is a rectangular linear assignment problem, solved exactly
//! with the shortest-augmenting-path Hungarian method.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::PatientRecord;
use crate::par;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("cannot match an empty arm")]
    EmptyArm,
    #[error("minority arm ({minority}) is larger than majority arm ({majority})")]
    Orientation { minority: usize, majority: usize },
    #[error("no bucket contains both arms")]
    NoMatchableBucket,
    #[error("{records} records but {buckets} bucket labels")]
    LengthMismatch { records: usize, buckets: usize },
}

pub type Result<T, E = MatchError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Untreated,
    Treated,
}

impl Arm {
    pub fn of(record: &PatientRecord) -> Arm {
        if record.treated {
            Arm::Treated
        } else {
            Arm::Untreated
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPlan {
    pub bucket: usize,
    pub minority_arm: Arm,
    /// `(minority id, majority id)`, in ascending minority id order.
    pub pairs: Vec<(String, String)>,
    /// Total squared distance over the pairs.
    pub objective: f64,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum-cost assignment of every row to a distinct column of a
/// `rows x cols` matrix with `rows <= cols`. Returns the column of each row.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "assignment needs rows <= cols");

    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Optimal pairing of `minority` into `majority` within one bucket. Both
/// sides are ordered by id before solving, so ties resolve the same way
/// regardless of input order.
pub fn match_bucket(
    bucket: usize,
    minority: &[&PatientRecord],
    majority: &[&PatientRecord],
) -> Result<MatchPlan> {
    if minority.is_empty() || majority.is_empty() {
        return Err(MatchError::EmptyArm);
    }
    if minority.len() > majority.len() {
        return Err(MatchError::Orientation {
            minority: minority.len(),
            majority: majority.len(),
        });
    }
    let mut rows = minority.to_vec();
    let mut cols = majority.to_vec();
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    cols.sort_by(|a, b| a.id.cmp(&b.id));
    let cost: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| cols.iter().map(|c| squared_distance(&r.covariates, &c.covariates)).collect())
        .collect();
    let assignment = solve_assignment(&cost);
    let objective = assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok(MatchPlan {
        bucket,
        minority_arm: Arm::of(rows[0]),
        pairs: assignment
            .iter()
            .enumerate()
            .map(|(i, &j)| (rows[i].id.clone(), cols[j].id.clone()))
            .collect(),
        objective,
    })
}

/// Patients retained for counterfactual modelling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedCohort {
    pub records: Vec<PatientRecord>,
    pub buckets: Vec<usize>,
    pub plans: Vec<MatchPlan>,
    pub warnings: Vec<String>,
}

impl MatchedCohort {
    /// Keeps every record as-is (matching disabled).
    pub fn unmatched(records: Vec<PatientRecord>, buckets: Vec<usize>) -> Result<Self> {
        if records.len() != buckets.len() {
            return Err(MatchError::LengthMismatch {
                records: records.len(),
                buckets: buckets.len(),
            });
        }
        Ok(MatchedCohort {
            records,
            buckets,
            plans: Vec::new(),
            warnings: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// (untreated, treated) counts.
    pub fn arm_counts(&self) -> (usize, usize) {
        let treated = self.records.iter().filter(|r| r.treated).count();
        (self.len() - treated, treated)
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.covariates.clone()).collect()
    }

    pub fn total_objective(&self) -> f64 {
        self.plans.iter().map(|p| p.objective).sum()
    }
}

/// Matches every bucket independently, the smaller arm being fully matched
/// (treated patients are the minority on ties). Buckets lacking an arm are
/// dropped with a warning. Retained records keep their input order.
pub fn match_cohort(records: &[PatientRecord], buckets: &[usize]) -> Result<MatchedCohort> {
    if records.len() != buckets.len() {
        return Err(MatchError::LengthMismatch {
            records: records.len(),
            buckets: buckets.len(),
        });
    }
    let ids: Vec<usize> = buckets.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let outcomes = par::map(&ids, |&k| {
        let members: Vec<&PatientRecord> = records
            .iter()
            .zip(buckets)
            .filter(|(_, &b)| b == k)
            .map(|(r, _)| r)
            .collect();
        let treated: Vec<&PatientRecord> = members.iter().copied().filter(|r| r.treated).collect();
        let untreated: Vec<&PatientRecord> = members.iter().copied().filter(|r| !r.treated).collect();
        if treated.is_empty() || untreated.is_empty() {
            let missing = if treated.is_empty() { "treated" } else { "untreated" };
            return Err(format!("bucket {k} dropped: no {missing} patients"));
        }
        let plan = if treated.len() <= untreated.len() {
            match_bucket(k, &treated, &untreated)
        } else {
            match_bucket(k, &untreated, &treated)
        };
        Ok(plan.expect("arms checked nonempty and oriented"))
    });

    let mut plans = Vec::new();
    let mut warnings = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(plan) => plans.push(plan),
            Err(w) => warnings.push(w),
        }
    }
    if plans.is_empty() {
        return Err(MatchError::NoMatchableBucket);
    }
    let kept: BTreeSet<&str> = plans
        .iter()
        .flat_map(|p| p.pairs.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()]))
        .collect();
    let (records_out, buckets_out) = records
        .iter()
        .zip(buckets)
        .filter(|(r, _)| kept.contains(r.id.as_str()))
        .map(|(r, &b)| (r.clone(), b))
        .unzip();
    Ok(MatchedCohort {
        records: records_out,
        buckets: buckets_out,
        plans,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, x: &[f64], treated: bool) -> PatientRecord {
        PatientRecord {
            id: id.into(),
            covariates: x.to_vec(),
            treated,
            event: false,
        }
    }

    #[test]
    fn singleton_pair() {
        let a = rec("a", &[1.0, 2.0], true);
        let b = rec("b", &[4.0, 6.0], false);
        let plan = match_bucket(1, &[&a], &[&b]).unwrap();
        assert_eq!(plan.pairs, vec![("a".to_string(), "b".to_string())]);
        assert_eq!(plan.objective, 25.0);
        assert_eq!(plan.minority_arm, Arm::Treated);
    }

    #[test]
    fn one_dimensional_example() {
        let mi = [rec("m0", &[0.0], true), rec("m1", &[10.0], true)];
        let ma = [rec("a", &[1.0], false), rec("b", &[9.0], false), rec("c", &[100.0], false)];
        let plan = match_bucket(2, &mi.iter().collect::<Vec<_>>(), &ma.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(plan.objective, 2.0);
        assert_eq!(
            plan.pairs,
            vec![("m0".to_string(), "a".to_string()), ("m1".to_string(), "b".to_string())]
        );
    }

    #[test]
    fn errors() {
        let a = rec("a", &[0.0], true);
        let b = rec("b", &[0.0], false);
        let c = rec("c", &[0.0], false);
        assert_eq!(match_bucket(1, &[], &[&a]), Err(MatchError::EmptyArm));
        assert!(matches!(
            match_bucket(1, &[&b, &c], &[&a]),
            Err(MatchError::Orientation { .. })
        ));
        assert_eq!(
            match_cohort(&[a.clone()], &[1]),
            Err(MatchError::NoMatchableBucket)
        );
    }

    #[test]
    fn cohort_counts_and_drop_rule() {
        let mut recs = Vec::new();
        let mut buckets = Vec::new();
        for i in 0..3 {
            recs.push(rec(&format!("t{i}"), &[i as f64], true));
            buckets.push(1);
        }
        for i in 0..7 {
            recs.push(rec(&format!("u{i}"), &[i as f64 * 0.5], false));
            buckets.push(1);
        }
        for i in 0..4 {
            recs.push(rec(&format!("z{i}"), &[i as f64], false));
            buckets.push(2);
        }
        let m = match_cohort(&recs, &buckets).unwrap();
        assert_eq!(m.len(), 6);
        assert_eq!(m.arm_counts(), (3, 3));
        assert_eq!(m.plans.len(), 1);
        assert_eq!(m.warnings, vec!["bucket 2 dropped: no treated patients".to_string()]);
    }

    #[test]
    fn balanced_buckets_keep_everyone() {
        let recs: Vec<PatientRecord> = (0..8)
            .map(|i| rec(&format!("p{i}"), &[i as f64], i % 2 == 0))
            .collect();
        let buckets = vec![1, 1, 1, 1, 2, 2, 2, 2];
        let m = match_cohort(&recs, &buckets).unwrap();
        assert_eq!(m.records, recs);
        // Each bucket pairs {0,2} with {1,3}: optimal total 1+1 per bucket.
        assert_eq!(m.total_objective(), 4.0);
    }
}
