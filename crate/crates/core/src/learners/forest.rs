//! Random forest with weighted Gini splits.
//!
//! Sample weights enter the node statistics (class-probability estimates,
//! impurity, leaf values), not the bootstrap sampling probabilities. This
//! keeps the equivalence "duplicating a row == doubling its weight" exact
//! when bootstrapping is off.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestSpec {
    pub n_trees: usize,
    /// None = grow until pure or min_samples_leaf.
    pub max_depth: Option<usize>,
    /// Minimum row count per child (raw rows, not weight mass).
    pub min_samples_leaf: usize,
    /// None = ceil(sqrt(d)).
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestSpec {
    fn default() -> Self {
        ForestSpec {
            n_trees: 100,
            max_depth: None,
            min_samples_leaf: 1,
            features_per_split: None,
            bootstrap: true,
        }
    }
}

impl ForestSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Config("forest needs at least one tree".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::Config("min_samples_leaf must be >= 1".into()));
        }
        if self.features_per_split == Some(0) {
            return Err(Error::Config("features_per_split must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        /// Weighted positive fraction of the training rows in this leaf.
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict_one(&self, row: &[f64]) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split { feature, threshold, left, right } => {
                    idx = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub n_features: usize,
    /// Unnormalized per-feature impurity decrease, summed over all trees.
    pub raw_importance: Vec<f64>,
    pub warning: bool,
}

impl ForestModel {
    pub fn predict_proba(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(x.nrows());
        let mut row = vec![0.0; x.ncols()];
        for i in 0..x.nrows() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = x[(i, j)];
            }
            let sum: f64 = self.trees.iter().map(|t| t.predict_one(&row)).sum();
            out[i] = sum / self.trees.len() as f64;
        }
        out
    }

    pub fn importance(&self) -> Result<Vec<f64>> {
        let total: f64 = self.raw_importance.iter().sum();
        if total <= 0.0 {
            return Err(Error::Numerical("forest contains no splits; importance undefined".into()));
        }
        Ok(self.raw_importance.iter().map(|v| v / total).collect())
    }
}

struct Grower<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [u8],
    w: &'a [f64],
    spec: &'a ForestSpec,
    features_per_split: usize,
    nodes: Vec<TreeNode>,
    importance: Vec<f64>,
    rng: rand_chacha::ChaCha8Rng,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    decrease: f64,
}

fn gini(w_pos: f64, w_total: f64) -> f64 {
    if w_total <= 0.0 {
        return 0.0;
    }
    let p = w_pos / w_total;
    2.0 * p * (1.0 - p)
}

impl<'a> Grower<'a> {
    fn grow(&mut self, rows: &[usize], depth: usize) -> usize {
        let w_total: f64 = rows.iter().map(|&i| self.w[i]).sum();
        let w_pos: f64 = rows.iter().filter(|&&i| self.y[i] == 1).map(|&i| self.w[i]).sum();
        let impurity = gini(w_pos, w_total);
        let at_depth_cap = self.spec.max_depth.is_some_and(|d| depth >= d);
        let splittable = !at_depth_cap
            && impurity > 0.0
            && rows.len() >= 2 * self.spec.min_samples_leaf;
        let best = if splittable { self.best_split(rows, impurity, w_total, w_pos) } else { None };
        match best {
            None => {
                self.nodes.push(TreeNode::Leaf { value: w_pos / w_total });
                self.nodes.len() - 1
            }
            Some(split) => {
                self.importance[split.feature] += w_total * split.decrease;
                let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
                    .iter()
                    .partition(|&&i| self.x[(i, split.feature)] <= split.threshold);
                let idx = self.nodes.len();
                // placeholder, patched after children are grown
                self.nodes.push(TreeNode::Leaf { value: 0.0 });
                let left = self.grow(&left_rows, depth + 1);
                let right = self.grow(&right_rows, depth + 1);
                self.nodes[idx] = TreeNode::Split {
                    feature: split.feature,
                    threshold: split.threshold,
                    left,
                    right,
                };
                idx
            }
        }
    }

    fn best_split(
        &mut self,
        rows: &[usize],
        impurity: f64,
        w_total: f64,
        w_pos_total: f64,
    ) -> Option<BestSplit> {
        let d = self.x.ncols();
        let candidates = sample_features(&mut self.rng, d, self.features_per_split);
        let mut best: Option<BestSplit> = None;
        let mut order: Vec<usize> = Vec::with_capacity(rows.len());
        for &feature in &candidates {
            order.clear();
            order.extend_from_slice(rows);
            order.sort_by(|&a, &b| {
                self.x[(a, feature)]
                    .partial_cmp(&self.x[(b, feature)])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let mut wl = 0.0;
            let mut wl_pos = 0.0;
            for split_at in 1..order.len() {
                let prev = order[split_at - 1];
                wl += self.w[prev];
                if self.y[prev] == 1 {
                    wl_pos += self.w[prev];
                }
                let cur = order[split_at];
                let v_prev = self.x[(prev, feature)];
                let v_cur = self.x[(cur, feature)];
                if v_prev == v_cur {
                    continue;
                }
                if split_at < self.spec.min_samples_leaf
                    || order.len() - split_at < self.spec.min_samples_leaf
                {
                    continue;
                }
                let wr = w_total - wl;
                let wr_pos = w_pos_total - wl_pos;
                let child = (wl / w_total) * gini(wl_pos, wl) + (wr / w_total) * gini(wr_pos, wr);
                let decrease = impurity - child;
                if decrease > 1e-12 && best.as_ref().is_none_or(|b| decrease > b.decrease) {
                    best = Some(BestSplit {
                        feature,
                        threshold: 0.5 * (v_prev + v_cur),
                        decrease,
                    });
                }
            }
        }
        best
    }
}

/// First `m` indices of a seeded Fisher-Yates pass over 0..d.
fn sample_features(rng: &mut rand_chacha::ChaCha8Rng, d: usize, m: usize) -> Vec<usize> {
    use rand::Rng;
    let mut idx: Vec<usize> = (0..d).collect();
    for i in 0..m.min(d) {
        let j = rng.random_range(i..d);
        idx.swap(i, j);
    }
    idx.truncate(m.min(d));
    idx
}

pub(super) fn fit(
    spec: &ForestSpec,
    x: &DMatrix<f64>,
    y: &[u8],
    w: &[f64],
    seed: u64,
) -> Result<ForestModel> {
    let d = x.ncols();
    if super::single_class(y) {
        let value = super::weighted_positive_rate(y, w);
        return Ok(ForestModel {
            trees: vec![Tree { nodes: vec![TreeNode::Leaf { value }] }],
            n_features: d,
            raw_importance: vec![0.0; d],
            warning: true,
        });
    }
    let fps = spec
        .features_per_split
        .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
        .min(d);
    let mut trees = Vec::with_capacity(spec.n_trees);
    let mut raw_importance = vec![0.0; d];
    for t in 0..spec.n_trees {
        let mut tree_rng = rng::stream(seed, t as u64);
        let rows: Vec<usize> = if spec.bootstrap {
            use rand::Rng;
            (0..x.nrows()).map(|_| tree_rng.random_range(0..x.nrows())).collect()
        } else {
            (0..x.nrows()).collect()
        };
        let mut grower = Grower {
            x,
            y,
            w,
            spec,
            features_per_split: fps,
            nodes: Vec::new(),
            importance: vec![0.0; d],
            rng: tree_rng,
        };
        grower.grow(&rows, 0);
        for (acc, v) in raw_importance.iter_mut().zip(&grower.importance) {
            *acc += v;
        }
        trees.push(Tree { nodes: grower.nodes });
    }
    Ok(ForestModel { trees, n_features: d, raw_importance, warning: false })
}
