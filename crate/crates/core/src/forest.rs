//! CART classification trees (Gini impurity) and a bagged random forest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    /// Features examined per split; `None` means `⌈√m⌉`.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 50,
            max_depth: 12,
            min_samples_split: 2,
            max_features: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Training class counts that reached this leaf.
    Leaf { counts: Vec<u32> },
}

/// Nodes are stored in creation order; children always come after their parent.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

impl DecisionTree {
    /// Validates structure: child links point forward, features are in range,
    /// and every leaf has `classes` counts.
    pub fn from_nodes(nodes: Vec<Node>, features: usize, classes: usize) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::domain("tree has no nodes"));
        }
        for (i, node) in nodes.iter().enumerate() {
            match node {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    if *feature >= features || !threshold.is_finite() {
                        return Err(Error::domain(format!("node {i} has an invalid split")));
                    }
                    if *left <= i || *right <= i || *left >= nodes.len() || *right >= nodes.len() {
                        return Err(Error::domain(format!("node {i} has invalid children")));
                    }
                }
                Node::Leaf { counts } => {
                    if counts.len() != classes || counts.iter().all(|&c| c == 0) {
                        return Err(Error::domain(format!("leaf {i} has invalid counts")));
                    }
                }
            }
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn leaf(&self, x: &[f64]) -> &[u32] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { counts } => return counts,
            }
        }
    }

    /// Class proportions at the leaf `x` lands in.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let counts = self.leaf(x);
        let total: u32 = counts.iter().sum();
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    }

    pub fn fit(
        data: &Matrix,
        labels: &[usize],
        classes: usize,
        sample: &[usize],
        cfg: &ForestConfig,
        rng: &mut Rng,
    ) -> Self {
        let per_split = cfg
            .max_features
            .unwrap_or_else(|| (data.cols() as f64).sqrt().ceil() as usize)
            .clamp(1, data.cols());
        let mut builder = Builder {
            data,
            labels,
            classes,
            cfg,
            per_split,
            nodes: Vec::new(),
        };
        let mut idx = sample.to_vec();
        builder.grow(&mut idx, 0, rng);
        Self {
            nodes: builder.nodes,
        }
    }
}

struct Builder<'a> {
    data: &'a Matrix,
    labels: &'a [usize],
    classes: usize,
    cfg: &'a ForestConfig,
    per_split: usize,
    nodes: Vec<Node>,
}

fn gini(counts: &[u32], total: u32) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / t).powi(2)).sum::<f64>()
}

impl Builder<'_> {
    fn counts(&self, idx: &[usize]) -> Vec<u32> {
        let mut counts = vec![0u32; self.classes];
        for &i in idx {
            counts[self.labels[i]] += 1;
        }
        counts
    }

    fn grow(&mut self, idx: &mut [usize], depth: usize, rng: &mut Rng) -> usize {
        let counts = self.counts(idx);
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let id = self.nodes.len();
        if pure || depth >= self.cfg.max_depth || idx.len() < self.cfg.min_samples_split {
            self.nodes.push(Node::Leaf { counts });
            return id;
        }
        let Some((feature, threshold)) = self.best_split(idx, &counts, rng) else {
            self.nodes.push(Node::Leaf { counts });
            return id;
        };
        // reserve the slot, children are appended after it
        self.nodes.push(Node::Leaf { counts });
        let mut split = 0;
        for i in 0..idx.len() {
            if self.data.get(idx[i], feature) <= threshold {
                idx.swap(i, split);
                split += 1;
            }
        }
        let (l, r) = idx.split_at_mut(split);
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    fn best_split(&self, idx: &[usize], counts: &[u32], rng: &mut Rng) -> Option<(usize, f64)> {
        let n = idx.len() as u32;
        let features = rng.sample_indices(self.data.cols(), self.per_split);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(idx.len());
        for feature in features {
            order.clear();
            order.extend(idx.iter().map(|&i| (self.data.get(i, feature), self.labels[i])));
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = vec![0u32; self.classes];
            let mut right = counts.to_vec();
            for pos in 1..order.len() {
                let (_, y) = order[pos - 1];
                left[y] += 1;
                right[y] -= 1;
                let (lo, hi) = (order[pos - 1].0, order[pos].0);
                if lo == hi {
                    continue;
                }
                let nl = pos as u32;
                let nr = n - nl;
                let score = (nl as f64 * gini(&left, nl) + nr as f64 * gini(&right, nr)) / n as f64;
                if best.map_or(true, |(s, _, _)| score < s) {
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some((score, feature, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    trees: Vec<DecisionTree>,
    classes: usize,
}

impl RandomForest {
    pub fn new(trees: Vec<DecisionTree>, classes: usize) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::domain("forest needs at least one tree"));
        }
        Ok(Self { trees, classes })
    }

    pub fn fit(data: &Matrix, labels: &[usize], classes: usize, cfg: &ForestConfig) -> Result<Self> {
        if cfg.trees == 0 || cfg.max_depth == 0 {
            return Err(Error::domain("forest needs positive tree count and depth"));
        }
        let n = data.rows();
        let trees = (0..cfg.trees)
            .map(|t| {
                let mut rng = Rng::derive(cfg.seed, t as u64);
                let sample: Vec<usize> = if cfg.bootstrap {
                    (0..n).map(|_| rng.below(n)).collect()
                } else {
                    (0..n).collect()
                };
                DecisionTree::fit(data, labels, classes, &sample, cfg, &mut rng)
            })
            .collect();
        Self::new(trees, classes)
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Mean of the per-tree leaf proportions.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.classes];
        for tree in &self.trees {
            for (a, p) in acc.iter_mut().zip(tree.predict_proba(x)) {
                *a += p;
            }
        }
        let n = self.trees.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}
