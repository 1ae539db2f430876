//! Hybrid detector: a random forest trained on benign and adversarial
//! features, an isolation forest trained on benign features only, and a
//! threshold on the sum of their benign scores.

mod forest;
mod iforest;

pub use forest::{fit_forest, fit_tree, DecisionTree, ForestConfig, RandomForest, TreeNode, ADVERSARIAL, BENIGN};
pub use iforest::{
    anomaly_score, average_path_length, fit_isolation_forest, harmonic, HarmonicConvention, IsolationConfig, IsolationForest,
    IsolationNode, IsolationTree, EULER_MASCHERONI,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::predictors::{Standardizer, PREDICTOR_COUNT};

pub const MIN_CALIBRATION_POINTS: usize = 100;

/// How the isolation-forest score enters the decision sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IfOrientation {
    /// `1 - 2^(-E/c)`, larger for inliers.
    #[default]
    Complement,
    /// `2^(-E/c)` as is.
    Raw,
}

/// Which predictors feed the detector, in `d1..d4` order.
pub type PredictorMask = [bool; PREDICTOR_COUNT];

pub const ALL_PREDICTORS: PredictorMask = [true; PREDICTOR_COUNT];

pub fn mask_name(mask: &PredictorMask) -> String {
    let names: Vec<String> = mask
        .iter()
        .enumerate()
        .filter(|(_, &on)| on)
        .map(|(i, _)| format!("d{}", i + 1))
        .collect();
    names.join("+")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub forest: ForestConfig,
    pub isolation: IsolationConfig,
    pub orientation: IfOrientation,
    pub mask: PredictorMask,
    pub standardize: bool,
    pub tnr: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            forest: ForestConfig::default(),
            isolation: IsolationConfig::default(),
            orientation: IfOrientation::Complement,
            mask: ALL_PREDICTORS,
            standardize: true,
            tnr: 0.95,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorManifest {
    /// Attack tags whose features trained the forest.
    pub attack_sources: Vec<String>,
    pub benign_train: usize,
    pub adversarial_train: usize,
    pub calibration_points: usize,
    pub tnr_target: f64,
    pub trees: usize,
    pub isolation_trees: usize,
    pub subsample: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridDetector {
    pub forest: RandomForest,
    pub isolation: IsolationForest,
    pub tau: Option<f64>,
    pub standardizer: Standardizer,
    pub mask: PredictorMask,
    pub orientation: IfOrientation,
    pub manifest: DetectorManifest,
}

pub fn train_rf(benign: &[Vec<f64>], adversarial: &[Vec<f64>], config: &ForestConfig) -> Result<RandomForest> {
    if benign.is_empty() {
        return Err(Error::EmptySplit("benign features"));
    }
    if adversarial.is_empty() {
        return Err(Error::EmptySplit("adversarial features"));
    }
    let x: Vec<Vec<f64>> = benign.iter().chain(adversarial).cloned().collect();
    let y: Vec<u8> = std::iter::repeat(BENIGN)
        .take(benign.len())
        .chain(std::iter::repeat(ADVERSARIAL).take(adversarial.len()))
        .collect();
    fit_forest(&x, &y, config)
}

pub fn train_if(benign: &[Vec<f64>], config: &IsolationConfig) -> Result<IsolationForest> {
    fit_isolation_forest(benign, config)
}

pub fn p_rf(forest: &RandomForest, x: &[f64]) -> f64 {
    forest.benign_proportion(x)
}

pub fn p_if(iforest: &IsolationForest, x: &[f64], orientation: IfOrientation) -> f64 {
    let s = iforest.anomaly_score(x);
    match orientation {
        IfOrientation::Complement => 1.0 - s,
        IfOrientation::Raw => s,
    }
}

/// `0` (benign) iff `score > tau`.
pub fn decide_score(score: f64, tau: f64) -> u8 {
    if score > tau {
        BENIGN
    } else {
        ADVERSARIAL
    }
}

/// Threshold leaving `ceil(tnr * n)` of `scores` strictly above it, absent ties.
pub fn threshold_for_tnr(scores: &[f64], tnr: f64) -> Result<f64> {
    if scores.len() < MIN_CALIBRATION_POINTS {
        return Err(Error::InsufficientData(format!(
            "{} calibration points, need at least {MIN_CALIBRATION_POINTS}",
            scores.len()
        )));
    }
    if !(0.0..=1.0).contains(&tnr) {
        return Err(Error::Config(format!("tnr target {tnr} outside [0, 1]")));
    }
    Ok(benign_threshold(scores, tnr))
}

/// Same rule as [`threshold_for_tnr`] without the sample-size floor; `scores`
/// must be non-empty.
pub fn benign_threshold(scores: &[f64], tnr: f64) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let above = ((tnr * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let m = n - above.min(n);
    if m == 0 {
        sorted[0].next_down()
    } else {
        sorted[m - 1]
    }
}

impl HybridDetector {
    /// Trains both forests and fits the standardizer on `benign`. The result
    /// still needs [`HybridDetector::calibrate`] before [`HybridDetector::decide`].
    pub fn train(
        benign: &[[f64; PREDICTOR_COUNT]],
        adversarial: &[[f64; PREDICTOR_COUNT]],
        attack_sources: &[String],
        config: &DetectorConfig,
    ) -> Result<Self> {
        if !config.mask.iter().any(|&m| m) {
            return Err(Error::EmptyMask);
        }
        let standardizer = if config.standardize {
            Standardizer::fit(benign)?
        } else {
            Standardizer::identity()
        };
        let mut det = Self {
            forest: RandomForest { trees: Vec::new() },
            isolation: IsolationForest {
                trees: Vec::new(),
                subsample: 0,
                convention: config.isolation.convention,
            },
            tau: None,
            standardizer,
            mask: config.mask,
            orientation: config.orientation,
            manifest: DetectorManifest {
                attack_sources: attack_sources.to_vec(),
                benign_train: benign.len(),
                adversarial_train: adversarial.len(),
                calibration_points: 0,
                tnr_target: config.tnr,
                trees: config.forest.trees,
                isolation_trees: config.isolation.trees,
                subsample: 0,
                seed: config.forest.seed,
            },
        };
        let b: Vec<Vec<f64>> = benign.iter().map(|d| det.project(d)).collect();
        let a: Vec<Vec<f64>> = adversarial.iter().map(|d| det.project(d)).collect();
        det.forest = train_rf(&b, &a, &config.forest)?;
        det.isolation = train_if(&b, &config.isolation)?;
        det.manifest.subsample = det.isolation.subsample;
        Ok(det)
    }

    /// Standardized, masked feature vector as seen by both forests.
    pub fn project(&self, d: &[f64; PREDICTOR_COUNT]) -> Vec<f64> {
        let z = self.standardizer.apply(d);
        z.iter().zip(&self.mask).filter(|(_, &m)| m).map(|(v, _)| *v).collect()
    }

    pub fn p_rf(&self, d: &[f64; PREDICTOR_COUNT]) -> f64 {
        p_rf(&self.forest, &self.project(d))
    }

    pub fn p_if(&self, d: &[f64; PREDICTOR_COUNT]) -> f64 {
        p_if(&self.isolation, &self.project(d), self.orientation)
    }

    /// `P_RF + P_IF`, the quantity compared against `tau`.
    pub fn score(&self, d: &[f64; PREDICTOR_COUNT]) -> f64 {
        let x = self.project(d);
        p_rf(&self.forest, &x) + p_if(&self.isolation, &x, self.orientation)
    }

    pub fn calibrate(&mut self, benign: &[[f64; PREDICTOR_COUNT]], tnr: f64) -> Result<f64> {
        let scores: Vec<f64> = benign.iter().map(|d| self.score(d)).collect();
        let tau = threshold_for_tnr(&scores, tnr)?;
        self.tau = Some(tau);
        self.manifest.calibration_points = benign.len();
        self.manifest.tnr_target = tnr;
        Ok(tau)
    }

    pub fn decide(&self, d: &[f64; PREDICTOR_COUNT]) -> Result<u8> {
        let tau = self.tau.ok_or(Error::Uncalibrated)?;
        Ok(decide_score(self.score(d), tau))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn decide_fixtures() {
        assert_eq!(decide_score(1.0 + 1.0, 1.5), BENIGN);
        assert_eq!(decide_score(0.2 + 0.3, 1.5), ADVERSARIAL);
        assert_eq!(decide_score(0.75 + 0.75, 1.5), ADVERSARIAL);
    }

    #[test]
    fn orientation_switch() {
        let iforest = IsolationForest {
            trees: vec![IsolationTree { nodes: vec![IsolationNode::External { size: 1 }] }],
            subsample: 256,
            convention: HarmonicConvention::Approximate,
        };
        assert_eq!(p_if(&iforest, &[0.0], IfOrientation::Raw), 1.0);
        assert_eq!(p_if(&iforest, &[0.0], IfOrientation::Complement), 0.0);
    }

    #[test]
    fn tnr_threshold_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scores: Vec<f64> = (0..1000).map(|_| rng.gen::<f64>() * 2.0).collect();
        let tau = threshold_for_tnr(&scores, 0.95).unwrap();
        assert_eq!(scores.iter().filter(|&&s| s > tau).count(), 950);
        let tau1 = threshold_for_tnr(&scores, 1.0).unwrap();
        assert!(scores.iter().all(|&s| s > tau1));
        assert_eq!(threshold_for_tnr(&scores, 0.95).unwrap(), tau);
        assert!(threshold_for_tnr(&scores[..99], 0.95).is_err());
    }

    fn cluster(rng: &mut ChaCha8Rng, n: usize, center: f64) -> Vec<[f64; 4]> {
        (0..n).map(|_| std::array::from_fn(|_| center + rng.gen_range(-1.0..1.0))).collect()
    }

    #[test]
    fn train_calibrate_decide_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let benign = cluster(&mut rng, 150, 0.0);
        let adv = cluster(&mut rng, 150, 3.0);
        let calib = cluster(&mut rng, 200, 0.0);
        let config = DetectorConfig {
            forest: ForestConfig { trees: 20, ..ForestConfig::default() },
            isolation: IsolationConfig { trees: 20, ..IsolationConfig::default() },
            ..DetectorConfig::default()
        };
        let mut det = HybridDetector::train(&benign, &adv, &["pgd-4".into()], &config).unwrap();
        assert!(matches!(det.decide(&benign[0]), Err(Error::Uncalibrated)));
        det.calibrate(&calib, 0.95).unwrap();
        let tnr = calib.iter().filter(|d| det.decide(d).unwrap() == BENIGN).count() as f64 / calib.len() as f64;
        assert!((tnr - 0.95).abs() <= 1.0 / calib.len() as f64 + 1e-12);
        let caught = cluster(&mut rng, 100, 3.0).iter().filter(|d| det.decide(d).unwrap() == ADVERSARIAL).count();
        assert!(caught >= 95, "{caught}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("detector.json");
        det.save(&path).unwrap();
        assert_eq!(HybridDetector::load(&path).unwrap(), det);
    }

    #[test]
    fn empty_mask_rejected() {
        let config = DetectorConfig { mask: [false; 4], ..DetectorConfig::default() };
        let d = vec![[0.0; 4]; 3];
        assert!(matches!(HybridDetector::train(&d, &d, &[], &config), Err(Error::EmptyMask)));
        assert_eq!(mask_name(&[false, false, true, true]), "d3+d4");
    }
}
