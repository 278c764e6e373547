//! Random forest: bagged Gini decision trees with majority voting.
//!
//! Deterministic for a fixed seed: per-tree RNGs are derived from the
//! config seed, and split search scans candidate features in sorted order.

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::RandomForestConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum TreeNode {
    Leaf {
        class: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<TreeNode>,
}

struct TreeBuilder<'a> {
    features: &'a Array2<f64>,
    labels: &'a [usize],
    n_classes: usize,
    max_depth: usize,
    min_samples_split: usize,
    features_per_split: usize,
    nodes: Vec<TreeNode>,
}

fn gini(counts: &[usize], total: f64) -> f64 {
    if total == 0.0 {
        return 0.0;
    }
    1.0 - counts
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            p * p
        })
        .sum::<f64>()
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

impl<'a> TreeBuilder<'a> {
    fn class_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_classes];
        for &i in indices {
            counts[self.labels[i]] += 1;
        }
        counts
    }

    fn build(&mut self, indices: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let counts = self.class_counts(indices);
        let total = indices.len() as f64;
        let node_impurity = gini(&counts, total);
        let is_pure = counts.iter().filter(|&&c| c > 0).count() <= 1;

        if is_pure
            || depth >= self.max_depth
            || indices.len() < self.min_samples_split
        {
            return self.push_leaf(&counts);
        }

        // Sample a feature subset, scanned in ascending order so equal-gain
        // ties resolve deterministically.
        let n_features = self.features.ncols();
        let mut candidates: Vec<usize> = (0..n_features).collect();
        for k in 0..self.features_per_split.min(n_features) {
            let j = rng.random_range(k..n_features);
            candidates.swap(k, j);
        }
        candidates.truncate(self.features_per_split.min(n_features));
        candidates.sort_unstable();

        let mut best: Option<(f64, usize, f64)> = None; // gain, feature, threshold
        for &feature in &candidates {
            indices.sort_by(|&a, &b| {
                self.features[[a, feature]]
                    .partial_cmp(&self.features[[b, feature]])
                    .expect("finite features")
            });
            let mut left_counts = vec![0usize; self.n_classes];
            let mut right_counts = counts.clone();
            for pos in 0..indices.len() - 1 {
                let label = self.labels[indices[pos]];
                left_counts[label] += 1;
                right_counts[label] -= 1;
                let here = self.features[[indices[pos], feature]];
                let next = self.features[[indices[pos + 1], feature]];
                if here == next {
                    continue;
                }
                let n_left = (pos + 1) as f64;
                let n_right = total - n_left;
                let weighted = (n_left * gini(&left_counts, n_left)
                    + n_right * gini(&right_counts, n_right))
                    / total;
                let gain = node_impurity - weighted;
                let threshold = (here + next) / 2.0;
                let better = match best {
                    None => gain > 1e-12,
                    Some((g, _, _)) => gain > g + 1e-12,
                };
                if better {
                    best = Some((gain, feature, threshold));
                }
            }
        }

        let Some((_, feature, threshold)) = best else {
            return self.push_leaf(&counts);
        };

        let (mut left_idx, mut right_idx): (Vec<usize>, Vec<usize>) =
            indices.iter().partition(|&&i| self.features[[i, feature]] <= threshold);
        if left_idx.is_empty() || right_idx.is_empty() {
            return self.push_leaf(&counts);
        }
        let node = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { class: 0 }); // placeholder
        let left = self.build(&mut left_idx, depth + 1, rng);
        let right = self.build(&mut right_idx, depth + 1, rng);
        self.nodes[node] = TreeNode::Split { feature, threshold, left, right };
        node
    }

    fn push_leaf(&mut self, counts: &[usize]) -> usize {
        let node = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { class: majority(counts) });
        node
    }
}

impl DecisionTree {
    fn fit(
        features: &Array2<f64>,
        labels: &[usize],
        n_classes: usize,
        config: &RandomForestConfig,
        sample: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let features_per_split = ((features.ncols() as f64).sqrt().floor() as usize).max(1);
        let mut builder = TreeBuilder {
            features,
            labels,
            n_classes,
            max_depth: config.max_depth,
            min_samples_split: config.min_samples_split,
            features_per_split,
            nodes: Vec::new(),
        };
        let mut indices = sample.to_vec();
        let root = builder.build(&mut indices, 0, rng);
        debug_assert_eq!(root, 0);
        DecisionTree { nodes: builder.nodes }
    }

    pub fn predict(&self, row: ArrayView1<'_, f64>) -> usize {
        let mut node = 0usize;
        loop {
            match &self.nodes[node] {
                TreeNode::Leaf { class } => return *class,
                TreeNode::Split { feature, threshold, left, right } => {
                    node = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

/// Bagged ensemble of Gini decision trees voting by majority.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    trees: Vec<DecisionTree>,
    n_classes: usize,
    n_features: usize,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RandomForest {
    pub fn fit(
        features: &Array2<f64>,
        labels: &[usize],
        n_classes: usize,
        config: &RandomForestConfig,
    ) -> Result<Self> {
        config.validate()?;
        let n = features.nrows();
        if n == 0 {
            return Err(Error::EmptyInput("random forest fit with no rows".into()));
        }
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!("{n} feature rows vs {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::ClassIndexOutOfRange { index: bad, classes: n_classes });
        }
        let distinct = {
            let mut seen = vec![false; n_classes];
            for &l in labels {
                seen[l] = true;
            }
            seen.iter().filter(|&&s| s).count()
        };
        if distinct < 2 {
            return Err(Error::SingleClassLabels);
        }

        let mut trees = Vec::with_capacity(config.n_estimators);
        for t in 0..config.n_estimators {
            let mut rng =
                ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ splitmix64(t as u64)));
            // Bootstrap sample with replacement.
            let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            trees.push(DecisionTree::fit(features, labels, n_classes, config, &sample, &mut rng));
        }
        Ok(RandomForest { trees, n_classes, n_features: features.ncols() })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Fraction of trees voting for each class.
    pub fn predict_proba(&self, row: ArrayView1<'_, f64>) -> Result<Vec<f64>> {
        if row.len() != self.n_features {
            return Err(Error::FeatureWidthMismatch { got: row.len(), expected: self.n_features });
        }
        let mut votes = vec![0usize; self.n_classes];
        for tree in &self.trees {
            votes[tree.predict(row)] += 1;
        }
        Ok(votes.iter().map(|&v| v as f64 / self.trees.len() as f64).collect())
    }

    /// Majority-vote class; ties break to the lowest index.
    pub fn predict(&self, row: ArrayView1<'_, f64>) -> Result<usize> {
        let proba = self.predict_proba(row)?;
        let mut best = 0;
        for (i, &p) in proba.iter().enumerate() {
            if p > proba[best] {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn predict_batch(&self, rows: &Array2<f64>) -> Result<Vec<usize>> {
        rows.rows().into_iter().map(|r| self.predict(r)).collect()
    }
}
