//! Prescriptive policy trees.
//!
//! A policy tree routes a patient by axis-aligned splits (`x[j] < t` goes
//! left) to a leaf that prescribes treatment or not. Training minimizes the
//! total predicted event probability of the prescribed actions,
//! `sum_i r_{tau(x_i)}(x_i)`, where each leaf prescribes whichever action has
//! the lower summed reward (ties prescribe no treatment).
//!
//! Induction is top-down. With `lookahead` enabled, a node that may still
//! grow two more levels scores each candidate split by the best depth-one
//! subtree on either side instead of by the two leaves, which makes depth-two
//! trees exactly optimal. A split is only taken when it strictly lowers the
//! objective.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::Normalization;
use crate::par;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PolicyError {
    #[error("{n} records cannot fill a leaf of {minbucket}")]
    TooSmall { n: usize, minbucket: usize },
    #[error("reward {value} of record {index} outside [0, 1]")]
    RewardOutOfRange { index: usize, value: f64 },
    #[error("expected {expected} covariates, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid tree configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = PolicyError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateThresholds {
    /// Every midpoint between consecutive distinct values.
    AllMidpoints,
    /// All midpoints when there are at most this many, otherwise this many
    /// evenly spaced in rank.
    Quantiles(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeConfig {
    pub max_depth: usize,
    /// Minimum training records per leaf.
    pub minbucket: usize,
    pub candidate_thresholds: CandidateThresholds,
    pub lookahead: bool,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            max_depth: 4,
            minbucket: 15,
            candidate_thresholds: CandidateThresholds::Quantiles(256),
            lookahead: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyNode {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<PolicyNode>,
        right: Box<PolicyNode>,
    },
    Leaf {
        treat: bool,
        count: usize,
        mean_r0: f64,
        mean_r1: f64,
    },
}

impl PolicyNode {
    pub fn depth(&self) -> usize {
        match self {
            PolicyNode::Leaf { .. } => 0,
            PolicyNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn leaves<'a>(&'a self, out: &mut Vec<&'a PolicyNode>) {
        match self {
            PolicyNode::Leaf { .. } => out.push(self),
            PolicyNode::Split { left, right, .. } => {
                left.leaves(out);
                right.leaves(out);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTree {
    pub feature_names: Vec<String>,
    pub root: PolicyNode,
}

/// Risk contrast within one leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafEffect {
    pub leaf: usize,
    pub treat: bool,
    pub count: usize,
    /// Mean predicted event probability without treatment.
    pub baseline_risk: f64,
    /// Mean predicted event probability with treatment.
    pub treated_risk: f64,
    /// Absolute risk reduction.
    pub arr: f64,
    /// Relative risk reduction; absent when the baseline risk is 0.
    pub rrr: Option<f64>,
}

impl LeafEffect {
    pub fn new(leaf: usize, treat: bool, count: usize, baseline_risk: f64, treated_risk: f64) -> Self {
        let arr = baseline_risk - treated_risk;
        LeafEffect {
            leaf,
            treat,
            count,
            baseline_risk,
            treated_risk,
            arr,
            rrr: (baseline_risk > 0.0).then(|| arr / baseline_risk),
        }
    }
}

impl PolicyTree {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    /// Preorder index of the leaf `x` reaches, and the leaf itself.
    pub fn route(&self, x: &[f64]) -> Result<(usize, &PolicyNode)> {
        if x.len() != self.n_features() {
            return Err(PolicyError::DimensionMismatch {
                expected: self.n_features(),
                got: x.len(),
            });
        }
        fn count_leaves(node: &PolicyNode) -> usize {
            match node {
                PolicyNode::Leaf { .. } => 1,
                PolicyNode::Split { left, right, .. } => count_leaves(left) + count_leaves(right),
            }
        }
        let mut node = &self.root;
        let mut leaf_id = 0;
        loop {
            match node {
                PolicyNode::Leaf { .. } => return Ok((leaf_id, node)),
                PolicyNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    if x[*feature] < *threshold {
                        node = left;
                    } else {
                        leaf_id += count_leaves(left);
                        node = right;
                    }
                }
            }
        }
    }

    /// Whether the policy treats `x`.
    pub fn prescribe(&self, x: &[f64]) -> Result<bool> {
        match self.route(x)?.1 {
            PolicyNode::Leaf { treat, .. } => Ok(*treat),
            PolicyNode::Split { .. } => unreachable!("route ends at a leaf"),
        }
    }

    /// Total reward of the prescribed actions over `features`.
    pub fn objective(&self, features: &[Vec<f64>], rewards: &[(f64, f64)]) -> Result<f64> {
        let mut total = 0.0;
        for (x, &(r0, r1)) in features.iter().zip(rewards) {
            total += if self.prescribe(x)? { r1 } else { r0 };
        }
        Ok(total)
    }

    pub fn leaf_count(&self) -> usize {
        let mut out = Vec::new();
        self.root.leaves(&mut out);
        out.len()
    }

    /// Mean rewards, ARR and RRR per leaf, computed from the records routed
    /// there. Leaves no record reaches are omitted.
    pub fn leaf_effects(&self, features: &[Vec<f64>], rewards: &[(f64, f64)]) -> Result<Vec<LeafEffect>> {
        let mut leaves = Vec::new();
        self.root.leaves(&mut leaves);
        let mut sums = vec![(0usize, 0.0, 0.0); leaves.len()];
        for (x, &(r0, r1)) in features.iter().zip(rewards) {
            let (id, _) = self.route(x)?;
            sums[id].0 += 1;
            sums[id].1 += r0;
            sums[id].2 += r1;
        }
        Ok(sums
            .iter()
            .zip(&leaves)
            .enumerate()
            .filter(|(_, ((count, _, _), _))| *count > 0)
            .map(|(id, (&(count, s0, s1), leaf))| {
                let treat = matches!(leaf, PolicyNode::Leaf { treat: true, .. });
                LeafEffect::new(id, treat, count, s0 / count as f64, s1 / count as f64)
            })
            .collect())
    }

    /// Graphviz rendering. With `normalization`, thresholds are shown on the
    /// covariates' input scale.
    pub fn to_dot(&self, normalization: Option<&Normalization>) -> String {
        let mut out = String::from("digraph policy {\n  node [shape=box, fontname=\"Helvetica\"];\n");
        let mut next = 0;
        self.dot_node(&self.root, normalization, &mut next, &mut out);
        out.push_str("}\n");
        out
    }

    fn dot_node(
        &self,
        node: &PolicyNode,
        normalization: Option<&Normalization>,
        next: &mut usize,
        out: &mut String,
    ) -> usize {
        let id = *next;
        *next += 1;
        match node {
            PolicyNode::Leaf {
                treat,
                count,
                mean_r0,
                mean_r1,
            } => {
                let effect = LeafEffect::new(0, *treat, *count, *mean_r0, *mean_r1);
                let rrr = effect.rrr.map_or("n/a".to_string(), |v| format!("{v:.3}"));
                out.push_str(&format!(
                    "  n{id} [label=\"treat = {}\\nn = {count}\\nARR = {:.3}\\nRRR = {rrr}\"];\n",
                    u8::from(*treat),
                    effect.arr
                ));
            }
            PolicyNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                let name = &self.feature_names[*feature];
                let shown = normalization.map_or(*threshold, |n| n.denormalize(name, *threshold));
                out.push_str(&format!(
                    "  n{id} [label=\"{} < {}\"];\n",
                    escape(name),
                    format_threshold(shown)
                ));
                let l = self.dot_node(left, normalization, next, out);
                out.push_str(&format!("  n{id} -> n{l} [label=\"yes\"];\n"));
                let r = self.dot_node(right, normalization, next, out);
                out.push_str(&format!("  n{id} -> n{r} [label=\"no\"];\n"));
            }
        }
        id
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn format_threshold(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".into()
    } else {
        s.to_string()
    }
}

struct Problem<'a> {
    x: &'a [Vec<f64>],
    r: &'a [(f64, f64)],
    config: &'a TreeConfig,
}

#[derive(Debug, Clone, Copy)]
struct Split {
    cost: f64,
    feature: usize,
    threshold: f64,
    /// Records going left, in the chosen feature's order.
    left_count: usize,
}

/// Member lists of one node, one per feature, each sorted by that feature
/// (ties by record index).
type Lists = Vec<Vec<usize>>;

fn sums(r: &[(f64, f64)], members: &[usize]) -> (f64, f64) {
    members.iter().fold((0.0, 0.0), |(a, b), &i| (a + r[i].0, b + r[i].1))
}

impl Problem<'_> {
    /// Boundary positions `p` (left = first `p` records) between distinct
    /// values, after candidate subsampling.
    fn boundaries(&self, sorted: &[usize], feature: usize) -> Vec<usize> {
        let x = |i: usize| self.x[sorted[i]][feature];
        let all: Vec<usize> = (1..sorted.len()).filter(|&p| x(p - 1) < x(p)).collect();
        match self.config.candidate_thresholds {
            CandidateThresholds::Quantiles(cap) if all.len() > cap && cap > 0 => {
                let mut picked: Vec<usize> = (0..cap)
                    .map(|k| all[(k * (all.len() - 1) + (cap - 1) / 2) / (cap - 1).max(1)])
                    .collect();
                picked.dedup();
                picked
            }
            _ => all,
        }
    }

    fn threshold(&self, sorted: &[usize], feature: usize, p: usize) -> f64 {
        let a = self.x[sorted[p - 1]][feature];
        let b = self.x[sorted[p]][feature];
        let mid = 0.5 * (a + b);
        if a < mid && mid < b {
            mid
        } else {
            b
        }
    }

    /// Cheapest single split of a node, scored by its two leaves.
    fn best_single(&self, lists: &Lists) -> Option<Split> {
        let m = lists[0].len();
        let minb = self.config.minbucket;
        if m < 2 * minb {
            return None;
        }
        let (t0, t1) = sums(self.r, &lists[0]);
        let mut best: Option<Split> = None;
        for (f, sorted) in lists.iter().enumerate() {
            let mut prefix = Vec::with_capacity(m + 1);
            prefix.push((0.0, 0.0));
            let (mut a, mut b) = (0.0, 0.0);
            for &i in sorted {
                a += self.r[i].0;
                b += self.r[i].1;
                prefix.push((a, b));
            }
            for p in self.boundaries(sorted, f) {
                if p < minb || m - p < minb {
                    continue;
                }
                let (l0, l1) = prefix[p];
                let cost = l0.min(l1) + (t0 - l0).min(t1 - l1);
                if best.is_none_or(|s| cost < s.cost) {
                    best = Some(Split {
                        cost,
                        feature: f,
                        threshold: self.threshold(sorted, f, p),
                        left_count: p,
                    });
                }
            }
        }
        best
    }

    fn leaf_cost(&self, lists: &Lists) -> f64 {
        let (s0, s1) = sums(self.r, &lists[0]);
        s0.min(s1)
    }

    /// Cheapest split scored by the best depth-one subtree on each side.
    fn best_lookahead(&self, lists: &Lists) -> Option<Split> {
        let m = lists[0].len();
        let minb = self.config.minbucket;
        if m < 2 * minb {
            return None;
        }
        let candidates: Vec<(usize, usize)> = lists
            .iter()
            .enumerate()
            .flat_map(|(f, sorted)| {
                self.boundaries(sorted, f)
                    .into_iter()
                    .filter(|&p| p >= minb && m - p >= minb)
                    .map(move |p| (f, p))
            })
            .collect();
        let scored = par::map(&candidates, |&(f, p)| {
            let (left, right) = partition(lists, &lists[f][..p]);
            let side = |l: &Lists| {
                let leaf = self.leaf_cost(l);
                self.best_single(l).map_or(leaf, |s| s.cost.min(leaf))
            };
            side(&left) + side(&right)
        });
        let mut best: Option<Split> = None;
        for (&(f, p), &cost) in candidates.iter().zip(&scored) {
            if best.is_none_or(|s| cost < s.cost) {
                best = Some(Split {
                    cost,
                    feature: f,
                    threshold: self.threshold(&lists[f], f, p),
                    left_count: p,
                });
            }
        }
        best
    }

    fn grow(&self, lists: Lists, depth: usize) -> PolicyNode {
        let m = lists[0].len();
        let (s0, s1) = sums(self.r, &lists[0]);
        let leaf_cost = s0.min(s1);
        let leaf = PolicyNode::Leaf {
            treat: s1 < s0,
            count: m,
            mean_r0: s0 / m as f64,
            mean_r1: s1 / m as f64,
        };
        let remaining = self.config.max_depth.saturating_sub(depth);
        if remaining == 0 {
            return leaf;
        }
        let split = if self.config.lookahead && remaining >= 2 {
            self.best_lookahead(&lists)
        } else {
            self.best_single(&lists)
        };
        let Some(split) = split else {
            return leaf;
        };
        if !(split.cost < leaf_cost - 1e-12 * (1.0 + leaf_cost)) {
            return leaf;
        }
        let goes_left = &lists[split.feature][..split.left_count];
        let (left, right) = partition(&lists, goes_left);
        PolicyNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: Box::new(self.grow(left, depth + 1)),
            right: Box::new(self.grow(right, depth + 1)),
        }
    }
}

/// Splits every per-feature list by membership in `left_members`, keeping order.
fn partition(lists: &Lists, left_members: &[usize]) -> (Lists, Lists) {
    let max = lists[0].iter().copied().max().unwrap_or(0);
    let mut is_left = vec![false; max + 1];
    for &i in left_members {
        is_left[i] = true;
    }
    lists
        .iter()
        .map(|l| l.iter().partition(|&&i| is_left[i]))
        .unzip()
}

/// Trains a policy tree on per-record rewards `(r0, r1)`, the predicted event
/// probabilities without and with treatment.
pub fn train_policy(
    features: &[Vec<f64>],
    rewards: &[(f64, f64)],
    feature_names: &[String],
    config: &TreeConfig,
) -> Result<PolicyTree> {
    if config.max_depth == 0 || config.minbucket == 0 {
        return Err(PolicyError::InvalidConfig(
            "max_depth and minbucket must be positive".into(),
        ));
    }
    if let CandidateThresholds::Quantiles(0) = config.candidate_thresholds {
        return Err(PolicyError::InvalidConfig("quantile count must be positive".into()));
    }
    let n = features.len();
    if rewards.len() != n {
        return Err(PolicyError::DimensionMismatch {
            expected: n,
            got: rewards.len(),
        });
    }
    if n < config.minbucket || n == 0 {
        return Err(PolicyError::TooSmall {
            n,
            minbucket: config.minbucket,
        });
    }
    let d = feature_names.len();
    if let Some(row) = features.iter().find(|r| r.len() != d) {
        return Err(PolicyError::DimensionMismatch {
            expected: d,
            got: row.len(),
        });
    }
    for (index, &(r0, r1)) in rewards.iter().enumerate() {
        for value in [r0, r1] {
            if !(0.0..=1.0).contains(&value) {
                return Err(PolicyError::RewardOutOfRange { index, value });
            }
        }
    }
    let lists: Lists = (0..d)
        .map(|f| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| features[a][f].total_cmp(&features[b][f]).then(a.cmp(&b)));
            order
        })
        .collect();
    let problem = Problem {
        x: features,
        r: rewards,
        config,
    };
    let root = if d == 0 {
        let (s0, s1) = rewards.iter().fold((0.0, 0.0), |(a, b), r| (a + r.0, b + r.1));
        PolicyNode::Leaf {
            treat: s1 < s0,
            count: n,
            mean_r0: s0 / n as f64,
            mean_r1: s1 / n as f64,
        }
    } else {
        problem.grow(lists, 0)
    };
    Ok(PolicyTree {
        feature_names: feature_names.to_vec(),
        root,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(d: usize) -> Vec<String> {
        (0..d).map(|j| format!("x{j}")).collect()
    }

    fn cfg(depth: usize, minbucket: usize) -> TreeConfig {
        TreeConfig {
            max_depth: depth,
            minbucket,
            ..TreeConfig::default()
        }
    }

    #[test]
    fn uniform_dominance_gives_constant_policy() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let r: Vec<(f64, f64)> = (0..20).map(|i| (0.5 + 0.01 * i as f64, 0.2)).collect();
        let t = train_policy(&x, &r, &names(1), &cfg(3, 2)).unwrap();
        assert_eq!(t.depth(), 0);
        assert!(t.prescribe(&[3.0]).unwrap());
    }

    #[test]
    fn ties_prescribe_no_treatment() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let r = vec![(0.3, 0.3); 20];
        let t = train_policy(&x, &r, &names(1), &cfg(3, 2)).unwrap();
        assert_eq!(t.depth(), 0);
        assert!(!t.prescribe(&[3.0]).unwrap());
    }

    #[test]
    fn step_policy_recovered() {
        // r1 < r0 by 0.2 iff x >= 5.
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let r: Vec<(f64, f64)> = (0..10)
            .map(|i| if i >= 5 { (0.5, 0.3) } else { (0.3, 0.5) })
            .collect();
        let t = train_policy(&x, &r, &names(1), &cfg(1, 1)).unwrap();
        match &t.root {
            PolicyNode::Split { feature, threshold, left, right } => {
                assert_eq!(*feature, 0);
                assert_eq!(*threshold, 4.5);
                assert!(matches!(**left, PolicyNode::Leaf { treat: false, .. }));
                assert!(matches!(**right, PolicyNode::Leaf { treat: true, .. }));
            }
            other => panic!("expected a split, got {other:?}"),
        }
        // Exhaustive over single splits: 3.0 at the step, 4.0 without a split.
        let best_single = (1..10)
            .map(|p| {
                let (l0, l1) = r[..p].iter().fold((0.0, 0.0), |a, v| (a.0 + v.0, a.1 + v.1));
                let (r0, r1) = r[p..].iter().fold((0.0, 0.0), |a, v| (a.0 + v.0, a.1 + v.1));
                l0.min(l1) + r0.min(r1)
            })
            .fold(f64::INFINITY, f64::min);
        assert!((t.objective(&x, &r).unwrap() - best_single).abs() < 1e-12);
        assert!((best_single - 3.0).abs() < 1e-12);
    }

    #[test]
    fn boundary_routes_right_and_dims_checked() {
        let tree = PolicyTree {
            feature_names: names(1),
            root: PolicyNode::Split {
                feature: 0,
                threshold: 2.0,
                left: Box::new(PolicyNode::Leaf { treat: false, count: 1, mean_r0: 0.0, mean_r1: 0.0 }),
                right: Box::new(PolicyNode::Leaf { treat: true, count: 1, mean_r0: 0.0, mean_r1: 0.0 }),
            },
        };
        assert!(tree.prescribe(&[2.0]).unwrap());
        assert!(!tree.prescribe(&[1.999]).unwrap());
        assert_eq!(
            tree.prescribe(&[1.0, 2.0]),
            Err(PolicyError::DimensionMismatch { expected: 1, got: 2 })
        );
    }

    #[test]
    fn leaf_effect_arithmetic() {
        let e = LeafEffect::new(0, true, 10, 0.80, 0.40);
        assert_eq!((e.arr, e.rrr), (0.40, Some(0.50)));
        let e = LeafEffect::new(0, true, 10, 0.40, 0.20);
        assert_eq!((e.arr, e.rrr), (0.20, Some(0.50)));
        let e = LeafEffect::new(0, false, 10, 0.3, 0.3);
        assert_eq!((e.arr, e.rrr), (0.0, Some(0.0)));
        assert_eq!(LeafEffect::new(0, false, 1, 0.0, 0.1).rrr, None);
    }

    #[test]
    fn errors() {
        let x = vec![vec![0.0]; 3];
        assert_eq!(
            train_policy(&x, &[(0.1, 0.1); 3], &names(1), &cfg(2, 5)),
            Err(PolicyError::TooSmall { n: 3, minbucket: 5 })
        );
        assert_eq!(
            train_policy(&x, &[(0.1, 1.5), (0.1, 0.1), (0.1, 0.1)], &names(1), &cfg(2, 1)),
            Err(PolicyError::RewardOutOfRange { index: 0, value: 1.5 })
        );
    }

    #[test]
    fn dot_structure() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let r: Vec<(f64, f64)> = (0..10)
            .map(|i| if i >= 5 { (0.5, 0.3) } else { (0.3, 0.5) })
            .collect();
        let t = train_policy(&x, &r, &names(1), &cfg(1, 1)).unwrap();
        let dot = t.to_dot(None);
        assert_eq!(dot.matches(" [label=").count() - dot.matches(" -> ").count(), 3);
        assert_eq!(dot.matches(" -> ").count(), 2);
        assert!(dot.contains("x0 < 4.5"));

        let flat = train_policy(&x, &vec![(0.2, 0.1); 10], &names(1), &cfg(1, 1)).unwrap();
        let dot = flat.to_dot(None);
        assert_eq!(dot.matches(" -> ").count(), 0);
        assert!(dot.contains("n0 [label=\"treat = 1"));
    }
}
