//! Isolation forest trained on benign features only.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EULER_MASCHERONI: f64 = 0.577_215_664_901_532_9;

/// How `H(i)` is evaluated inside `c(n)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HarmonicConvention {
    /// `H(i) ~ ln(i) + gamma`.
    #[default]
    Approximate,
    /// `H(i) = 1 + 1/2 + ... + 1/i`.
    Exact,
}

pub fn harmonic(i: usize, convention: HarmonicConvention) -> f64 {
    match convention {
        HarmonicConvention::Approximate => (i as f64).ln() + EULER_MASCHERONI,
        HarmonicConvention::Exact => (1..=i).map(|k| 1.0 / k as f64).sum(),
    }
}

/// Average path length of an unsuccessful binary-search-tree lookup over `n`
/// points: `c(n) = 2 H(n - 1) - 2 (n - 1) / n`, and `0` for `n <= 1`.
pub fn average_path_length(n: usize, convention: HarmonicConvention) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let m = (n - 1) as f64;
    2.0 * harmonic(n - 1, convention) - 2.0 * m / n as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum IsolationNode {
    External { size: usize },
    Internal { feature: usize, threshold: f64, left: usize, right: usize },
}

/// `x[feature] < threshold` goes left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsolationTree {
    pub nodes: Vec<IsolationNode>,
}

impl IsolationTree {
    /// Edges traversed plus `c(size)` at the terminating external node.
    pub fn path_length(&self, x: &[f64], convention: HarmonicConvention) -> f64 {
        let mut i = 0;
        let mut depth = 0.0;
        loop {
            match &self.nodes[i] {
                IsolationNode::External { size } => return depth + average_path_length(*size, convention),
                IsolationNode::Internal { feature, threshold, left, right } => {
                    i = if x[*feature] < *threshold { *left } else { *right };
                    depth += 1.0;
                }
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct IsolationConfig {
    pub trees: usize,
    /// Subsample size psi.
    pub subsample: usize,
    pub convention: HarmonicConvention,
    pub seed: u64,
}

impl Default for IsolationConfig {
    fn default() -> Self {
        Self {
            trees: 100,
            subsample: 256,
            convention: HarmonicConvention::Approximate,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsolationForest {
    pub trees: Vec<IsolationTree>,
    /// Effective subsample size used to normalize path lengths.
    pub subsample: usize,
    pub convention: HarmonicConvention,
}

impl IsolationForest {
    pub fn mean_path_length(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.path_length(x, self.convention)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn normalizer(&self) -> f64 {
        average_path_length(self.subsample, self.convention)
    }

    /// `2^(-E(h(x)) / c(psi))`: close to 1 for anomalies, lower for inliers.
    pub fn anomaly_score(&self, x: &[f64]) -> f64 {
        anomaly_score(self.mean_path_length(x), self.normalizer())
    }
}

pub fn anomaly_score(mean_path: f64, normalizer: f64) -> f64 {
    2f64.powf(-mean_path / normalizer)
}

fn grow(data: &[Vec<f64>], idx: &mut [usize], depth: usize, limit: usize, rng: &mut ChaCha8Rng, nodes: &mut Vec<IsolationNode>) -> usize {
    let id = nodes.len();
    nodes.push(IsolationNode::External { size: idx.len() });
    if idx.len() <= 1 || depth >= limit {
        return id;
    }
    let dim = data[0].len();
    // features with spread in this node
    let candidates: Vec<(usize, f64, f64)> = (0..dim)
        .filter_map(|f| {
            let (lo, hi) = idx
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| (lo.min(data[i][f]), hi.max(data[i][f])));
            (hi > lo).then_some((f, lo, hi))
        })
        .collect();
    if candidates.is_empty() {
        return id;
    }
    let (feature, lo, hi) = candidates[rng.gen_range(0..candidates.len())];
    let threshold = rng.gen_range(lo..hi);
    let mut mid = 0;
    for j in 0..idx.len() {
        if data[idx[j]][feature] < threshold {
            idx.swap(mid, j);
            mid += 1;
        }
    }
    let (l, r) = idx.split_at_mut(mid);
    let left = grow(data, l, depth + 1, limit, rng, nodes);
    let right = grow(data, r, depth + 1, limit, rng, nodes);
    nodes[id] = IsolationNode::Internal { feature, threshold, left, right };
    id
}

pub fn fit_isolation_forest(data: &[Vec<f64>], config: &IsolationConfig) -> Result<IsolationForest> {
    if data.is_empty() {
        return Err(Error::EmptySplit("benign features"));
    }
    if config.trees == 0 {
        return Err(Error::Config("isolation forest needs at least one tree".into()));
    }
    let psi = config.subsample.min(data.len()).max(1);
    let limit = (psi as f64).log2().ceil().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let trees = (0..config.trees)
        .map(|_| {
            let mut idx = sample(&mut rng, data.len(), psi).into_vec();
            let mut nodes = Vec::new();
            grow(data, &mut idx, 0, limit, &mut rng, &mut nodes);
            IsolationTree { nodes }
        })
        .collect();
    Ok(IsolationForest {
        trees,
        subsample: psi,
        convention: config.convention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_length_normalizer_for_two() {
        let approx = average_path_length(2, HarmonicConvention::Approximate);
        assert!((approx - (2.0 * EULER_MASCHERONI - 1.0)).abs() < 1e-15);
        assert!((approx - 0.1544).abs() < 1e-4);
        let exact = average_path_length(2, HarmonicConvention::Exact);
        assert!((exact - 1.0).abs() < 1e-15);
        assert_eq!(average_path_length(1, HarmonicConvention::Approximate), 0.0);
    }

    #[test]
    fn score_at_normalizer_is_half() {
        let c = average_path_length(256, HarmonicConvention::Approximate);
        assert_eq!(anomaly_score(c, c), 0.5);
        assert_eq!(anomaly_score(0.0, c), 1.0);
    }

    #[test]
    fn hand_built_tree_path_lengths() {
        // depth-2 tree: root splits f0 < 0, left child splits f1 < 1.
        let tree = IsolationTree {
            nodes: vec![
                IsolationNode::Internal { feature: 0, threshold: 0.0, left: 1, right: 4 },
                IsolationNode::Internal { feature: 1, threshold: 1.0, left: 2, right: 3 },
                IsolationNode::External { size: 1 },
                IsolationNode::External { size: 3 },
                IsolationNode::External { size: 2 },
            ],
        };
        let conv = HarmonicConvention::Approximate;
        assert_eq!(tree.path_length(&[-1.0, 0.0], conv), 2.0);
        let c3 = 2.0 * (2f64.ln() + EULER_MASCHERONI) - 4.0 / 3.0;
        assert!((tree.path_length(&[-1.0, 5.0], conv) - (2.0 + c3)).abs() < 1e-15);
        let c2 = 2.0 * EULER_MASCHERONI - 1.0;
        assert!((tree.path_length(&[3.0, 0.0], conv) - (1.0 + c2)).abs() < 1e-15);
        let forest = IsolationForest { trees: vec![tree], subsample: 4, convention: conv };
        let c4 = 2.0 * (3f64.ln() + EULER_MASCHERONI) - 1.5;
        let expected = 2f64.powf(-2.0 / c4);
        assert!((forest.anomaly_score(&[-1.0, 0.0]) - expected).abs() < 1e-15);
    }

    #[test]
    fn outlier_scores_above_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut data: Vec<Vec<f64>> = (0..300).map(|_| vec![rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]).collect();
        data.push(vec![8.0, 8.0]);
        data.push(vec![8.0, 8.0]);
        let forest = fit_isolation_forest(&data, &IsolationConfig::default()).unwrap();
        let outlier = forest.anomaly_score(&[8.0, 8.0]);
        let max_inlier = data[..300].iter().map(|x| forest.anomaly_score(x)).fold(0.0, f64::max);
        assert!(outlier > max_inlier, "{outlier} <= {max_inlier}");
        for x in &data {
            let s = forest.anomaly_score(x);
            assert!(s > 0.0 && s <= 1.0);
        }
        assert_eq!(fit_isolation_forest(&data, &IsolationConfig::default()).unwrap(), forest);
        assert!(fit_isolation_forest(&[], &IsolationConfig::default()).is_err());
    }
}
