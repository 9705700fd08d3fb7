//! Bagged CART classifier used for the baseline risk model and for both
//! counterfactual outcome models.
//!
//! Each tree is grown on a weighted bootstrap resample (draw probability
//! proportional to record weight) and splits by weighted Gini impurity over a
//! random feature subset. Leaves hold the Laplace-smoothed weighted event
//! fraction `(w1 + 1) / (w + 2)`. Tree `t` uses seed `config.seed + t`, so a
//! forest is identical however many threads build it.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{par, seed};

#[derive(Debug, Error, PartialEq)]
pub enum ForestError {
    #[error("labels contain a single class")]
    SingleClass,
    #[error("{n} records cannot fill two leaves of at least {min_leaf}")]
    TooSmall { n: usize, min_leaf: usize },
    #[error("expected {expected} covariates, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid record weights: {0}")]
    InvalidWeights(String),
    #[error("invalid forest configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = ForestError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features drawn per split; `None` means `ceil(sqrt(d))`.
    pub features_per_split: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 200,
            max_depth: 8,
            min_leaf: 5,
            features_per_split: None,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        ForestConfig {
            seed,
            ..self.clone()
        }
    }

    fn subset_size(&self, d: usize) -> Result<usize> {
        match self.features_per_split {
            Some(k) if k == 0 || k > d => Err(ForestError::InvalidConfig(format!(
                "features_per_split {k} outside [1, {d}]"
            ))),
            Some(k) => Ok(k),
            None => Ok(((d as f64).sqrt().ceil() as usize).clamp(1, d)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingArm {
    Baseline,
    Untreated,
    Treated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        probability: f64,
    },
}

impl Node {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                Node::Leaf { probability } => return *probability,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if x[*feature] < *threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    /// Visits every node, depth first.
    pub fn walk(&self, visit: &mut impl FnMut(&Node)) {
        visit(self);
        if let Node::Split { left, right, .. } = self {
            left.walk(visit);
            right.walk(visit);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Node>,
    pub config: ForestConfig,
    pub training_arm: TrainingArm,
    pub n_features: usize,
}

impl Forest {
    /// Assembles a forest from prebuilt trees.
    pub fn from_trees(trees: Vec<Node>, n_features: usize, training_arm: TrainingArm) -> Self {
        Forest {
            config: ForestConfig {
                n_trees: trees.len(),
                ..ForestConfig::default()
            },
            trees,
            training_arm,
            n_features,
        }
    }

    /// A one-tree forest that predicts `probability` everywhere.
    pub fn constant(probability: f64, n_features: usize, training_arm: TrainingArm) -> Self {
        Forest::from_trees(vec![Node::Leaf { probability }], n_features, training_arm)
    }

    pub fn train(
        features: &[Vec<f64>],
        labels: &[bool],
        weights: Option<&[f64]>,
        config: &ForestConfig,
        training_arm: TrainingArm,
    ) -> Result<Forest> {
        Self::fit(features, labels, weights, config, training_arm).map(|(forest, _)| forest)
    }

    /// Trains like [`Forest::train`] and also returns each training record's
    /// out-of-bag prediction: the mean over trees whose bootstrap sample
    /// left it out (the full-forest prediction if every tree drew it).
    pub fn train_with_oob(
        features: &[Vec<f64>],
        labels: &[bool],
        weights: Option<&[f64]>,
        config: &ForestConfig,
        training_arm: TrainingArm,
    ) -> Result<(Forest, Vec<f64>)> {
        let (forest, in_bag) = Self::fit(features, labels, weights, config, training_arm)?;
        let oob = features
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let (sum, count) = forest
                    .trees
                    .iter()
                    .zip(&in_bag)
                    .filter(|(_, bag)| !bag[i])
                    .fold((0.0, 0usize), |(s, c), (tree, _)| (s + tree.predict(x), c + 1));
                if count == 0 {
                    forest.predict_proba(x)
                } else {
                    Ok(sum / count as f64)
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok((forest, oob))
    }

    fn fit(
        features: &[Vec<f64>],
        labels: &[bool],
        weights: Option<&[f64]>,
        config: &ForestConfig,
        training_arm: TrainingArm,
    ) -> Result<(Forest, Vec<Vec<bool>>)> {
        if config.n_trees == 0 || config.max_depth == 0 || config.min_leaf == 0 {
            return Err(ForestError::InvalidConfig(
                "n_trees, max_depth and min_leaf must be positive".into(),
            ));
        }
        let n = features.len();
        if labels.len() != n {
            return Err(ForestError::DimensionMismatch {
                expected: n,
                got: labels.len(),
            });
        }
        if n < 2 * config.min_leaf {
            return Err(ForestError::TooSmall {
                n,
                min_leaf: config.min_leaf,
            });
        }
        let d = features[0].len();
        if d == 0 {
            return Err(ForestError::DimensionMismatch { expected: 1, got: 0 });
        }
        if let Some(row) = features.iter().find(|r| r.len() != d) {
            return Err(ForestError::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        let k = config.subset_size(d)?;
        let positives = labels.iter().filter(|&&y| y).count();
        if positives == 0 || positives == n {
            return Err(ForestError::SingleClass);
        }
        let weights = match weights {
            Some(w) if w.len() != n => {
                return Err(ForestError::InvalidWeights(format!(
                    "{} weights for {n} records",
                    w.len()
                )))
            }
            Some(w) if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) => {
                return Err(ForestError::InvalidWeights(
                    "weights must be finite and strictly positive".into(),
                ))
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; n],
        };

        let data = Data {
            columns: (0..d)
                .map(|j| features.iter().map(|r| r[j]).collect())
                .collect(),
            labels: labels.iter().map(|&y| f64::from(u8::from(y))).collect(),
            weights,
        };
        let (trees, in_bag) = par::map_indexed(config.n_trees, |t| {
            grow_tree(&data, config, k, config.seed.wrapping_add(t as u64))
        })
        .into_iter()
        .unzip();
        Ok((
            Forest {
                trees,
                config: config.clone(),
                training_arm,
                n_features: d,
            },
            in_bag,
        ))
    }

    /// Mean of the per-tree leaf probabilities.
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(ForestError::DimensionMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        let total: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        Ok(total / self.trees.len() as f64)
    }

    pub fn predict_many(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        rows.iter().map(|x| self.predict_proba(x)).collect()
    }

    /// Area under the ROC curve of this forest's predictions.
    pub fn auc(&self, features: &[Vec<f64>], labels: &[bool]) -> Result<f64> {
        auc_scores(&self.predict_many(features)?, labels)
    }
}

/// Mann–Whitney AUC: the probability that a random positive outscores a
/// random negative, ties counting one half.
pub fn auc_scores(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(ForestError::DimensionMismatch {
            expected: labels.len(),
            got: scores.len(),
        });
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(ForestError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

struct Data {
    columns: Vec<Vec<f64>>,
    labels: Vec<f64>,
    weights: Vec<f64>,
}

/// Working state for one tree: the bootstrap sample and, per feature, the
/// sample positions sorted by that feature. Every node owns the same
/// contiguous range in each sorted list.
struct Grower<'a, R> {
    data: &'a Data,
    config: &'a ForestConfig,
    k: usize,
    rng: R,
    rows: Vec<usize>,
    sorted: Vec<Vec<u32>>,
    goes_left: Vec<bool>,
    scratch: Vec<u32>,
}

struct Candidate {
    impurity: f64,
    feature: usize,
    threshold: f64,
}

/// Grows one tree; also returns which records its bootstrap drew.
fn grow_tree(data: &Data, config: &ForestConfig, k: usize, tree_seed: u64) -> (Node, Vec<bool>) {
    let mut rng = seed::rng(tree_seed);
    let n = data.labels.len();
    let sampler = WeightedIndex::new(&data.weights).expect("weights validated");
    let rows: Vec<usize> = (0..n).map(|_| sampler.sample(&mut rng)).collect();
    let mut in_bag = vec![false; n];
    for &r in &rows {
        in_bag[r] = true;
    }
    let sorted = data
        .columns
        .iter()
        .map(|col| {
            let mut order: Vec<u32> = (0..n as u32).collect();
            order.sort_by(|&a, &b| col[rows[a as usize]].total_cmp(&col[rows[b as usize]]));
            order
        })
        .collect();
    let mut grower = Grower {
        data,
        config,
        k,
        rng,
        rows,
        sorted,
        goes_left: vec![false; n],
        scratch: Vec::with_capacity(n),
    };
    (grower.grow(0, n, 0), in_bag)
}

impl<R: Rng> Grower<'_, R> {
    fn label(&self, pos: u32) -> (f64, f64) {
        let row = self.rows[pos as usize];
        (self.data.labels[row], self.data.weights[row])
    }

    fn value(&self, feature: usize, pos: u32) -> f64 {
        self.data.columns[feature][self.rows[pos as usize]]
    }

    fn grow(&mut self, lo: usize, hi: usize, depth: usize) -> Node {
        let (mut w1, mut w) = (0.0, 0.0);
        for &pos in &self.sorted[0][lo..hi] {
            let (y, wt) = self.label(pos);
            w1 += y * wt;
            w += wt;
        }
        let leaf = Node::Leaf {
            probability: (w1 + 1.0) / (w + 2.0),
        };
        let m = hi - lo;
        if depth >= self.config.max_depth || m < 2 * self.config.min_leaf || w1 == 0.0 || w1 == w {
            return leaf;
        }
        let parent = w1 * (w - w1) / w;
        let Some(best) = self.best_split(lo, hi, w1, w) else {
            return leaf;
        };
        if best.impurity >= parent - 1e-12 * w {
            return leaf;
        }

        for i in lo..hi {
            let pos = self.sorted[best.feature][i];
            self.goes_left[pos as usize] = self.value(best.feature, pos) < best.threshold;
        }
        let mut n_left = 0;
        for j in 0..self.sorted.len() {
            self.scratch.clear();
            let seg = &mut self.sorted[j][lo..hi];
            let mut write = 0;
            for i in 0..seg.len() {
                let pos = seg[i];
                if self.goes_left[pos as usize] {
                    seg[write] = pos;
                    write += 1;
                } else {
                    self.scratch.push(pos);
                }
            }
            seg[write..].copy_from_slice(&self.scratch);
            n_left = write;
        }
        let mid = lo + n_left;
        let left = self.grow(lo, mid, depth + 1);
        let right = self.grow(mid, hi, depth + 1);
        Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    fn best_split(&mut self, lo: usize, hi: usize, w1_total: f64, w_total: f64) -> Option<Candidate> {
        let d = self.sorted.len();
        let mut features: Vec<usize> = rand::seq::index::sample(&mut self.rng, d, self.k).into_vec();
        features.sort_unstable();
        let min_leaf = self.config.min_leaf;
        let m = hi - lo;
        let mut best: Option<Candidate> = None;
        for &f in &features {
            let (mut l1, mut lw) = (0.0, 0.0);
            for i in lo..hi - 1 {
                let pos = self.sorted[f][i];
                let (y, wt) = self.label(pos);
                l1 += y * wt;
                lw += wt;
                let count_left = i - lo + 1;
                if count_left < min_leaf || m - count_left < min_leaf {
                    continue;
                }
                let a = self.value(f, pos);
                let b = self.value(f, self.sorted[f][i + 1]);
                if a == b {
                    continue;
                }
                let threshold = 0.5 * (a + b);
                if !(a < threshold && threshold < b) {
                    continue;
                }
                let (r1, rw) = (w1_total - l1, w_total - lw);
                let impurity = l1 * (lw - l1) / lw + r1 * (rw - r1) / rw;
                if best.as_ref().is_none_or(|c| impurity < c.impurity) {
                    best = Some(Candidate {
                        impurity,
                        feature: f,
                        threshold,
                    });
                }
            }
        }
        best
    }
}
