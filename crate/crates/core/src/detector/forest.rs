//! Random forest of CART trees (Gini impurity, bootstrap, random feature subsets).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BENIGN: u8 = 0;
pub const ADVERSARIAL: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf { class: u8 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// Binary decision tree; node 0 is the root, `x[feature] <= threshold` goes left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
}

impl DecisionTree {
    pub fn predict(&self, x: &[f64]) -> u8 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { class } => return *class,
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    /// Features tried per split; `None` means `round(sqrt(d))`.
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 100,
            max_depth: 16,
            min_samples_split: 2,
            max_features: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub trees: Vec<DecisionTree>,
}

impl RandomForest {
    pub fn from_trees(trees: Vec<DecisionTree>) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::Config("forest needs at least one tree".into()));
        }
        Ok(Self { trees })
    }

    /// Fraction of trees voting benign.
    pub fn benign_proportion(&self, x: &[f64]) -> f64 {
        let votes = self.trees.iter().filter(|t| t.predict(x) == BENIGN).count();
        votes as f64 / self.trees.len() as f64
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        if self.benign_proportion(x) >= 0.5 {
            BENIGN
        } else {
            ADVERSARIAL
        }
    }
}

fn gini(counts: [usize; 2]) -> f64 {
    let n = (counts[0] + counts[1]) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let p0 = counts[0] as f64 / n;
    let p1 = counts[1] as f64 / n;
    1.0 - p0 * p0 - p1 * p1
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [u8],
    config: &'a ForestConfig,
    max_features: usize,
    nodes: Vec<TreeNode>,
}

impl Builder<'_> {
    fn majority(&self, idx: &[usize]) -> u8 {
        let adv = idx.iter().filter(|&&i| self.y[i] == ADVERSARIAL).count();
        if 2 * adv > idx.len() {
            ADVERSARIAL
        } else {
            BENIGN
        }
    }

    fn build(&mut self, idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { class: self.majority(idx) });
        let pure = idx.iter().all(|&i| self.y[i] == self.y[idx[0]]);
        if pure || depth >= self.config.max_depth || idx.len() < self.config.min_samples_split {
            return id;
        }
        let dim = self.x[0].len();
        let mut best: Option<(f64, usize, f64)> = None;
        let parent = {
            let adv = idx.iter().filter(|&&i| self.y[i] == ADVERSARIAL).count();
            gini([idx.len() - adv, adv])
        };
        for feature in sample(rng, dim, self.max_features.min(dim)).into_iter() {
            idx.sort_by(|&a, &b| self.x[a][feature].total_cmp(&self.x[b][feature]));
            let total_adv = idx.iter().filter(|&&i| self.y[i] == ADVERSARIAL).count();
            let n = idx.len();
            let mut left = [0usize; 2];
            for split in 1..n {
                left[self.y[idx[split - 1]] as usize] += 1;
                let lo = self.x[idx[split - 1]][feature];
                let hi = self.x[idx[split]][feature];
                if lo == hi {
                    continue;
                }
                let right = [n - split - (total_adv - left[1]), total_adv - left[1]];
                let impurity = (split as f64 * gini(left) + (n - split) as f64 * gini(right)) / n as f64;
                if best.map_or(true, |(b, _, _)| impurity < b) {
                    best = Some((impurity, feature, lo + (hi - lo) / 2.0));
                }
            }
        }
        let Some((impurity, feature, threshold)) = best else {
            return id;
        };
        if impurity >= parent {
            return id;
        }
        let mid = partition(idx, |i| self.x[i][feature] <= threshold);
        let (l, r) = idx.split_at_mut(mid);
        let left = self.build(l, depth + 1, rng);
        let right = self.build(r, depth + 1, rng);
        self.nodes[id] = TreeNode::Split { feature, threshold, left, right };
        id
    }
}

fn partition(idx: &mut [usize], pred: impl Fn(usize) -> bool) -> usize {
    let mut mid = 0;
    for j in 0..idx.len() {
        if pred(idx[j]) {
            idx.swap(mid, j);
            mid += 1;
        }
    }
    mid
}

pub fn fit_tree(x: &[Vec<f64>], y: &[u8], sample_idx: &mut [usize], config: &ForestConfig, rng: &mut ChaCha8Rng) -> DecisionTree {
    let dim = x[0].len();
    let max_features = config
        .max_features
        .unwrap_or_else(|| ((dim as f64).sqrt().round() as usize).max(1));
    let mut b = Builder {
        x,
        y,
        config,
        max_features,
        nodes: Vec::new(),
    };
    b.build(sample_idx, 0, rng);
    DecisionTree { nodes: b.nodes }
}

pub fn fit_forest(x: &[Vec<f64>], y: &[u8], config: &ForestConfig) -> Result<RandomForest> {
    if x.len() != y.len() {
        return Err(Error::VectorLength(x.len(), y.len()));
    }
    if !y.contains(&BENIGN) || !y.contains(&ADVERSARIAL) {
        return Err(Error::InsufficientData("random forest needs both benign and adversarial samples".into()));
    }
    if config.trees == 0 {
        return Err(Error::Config("forest needs at least one tree".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = x.len();
    let trees = (0..config.trees)
        .map(|_| {
            let mut boot: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            fit_tree(x, y, &mut boot, config, &mut rng)
        })
        .collect();
    Ok(RandomForest { trees })
}
