//! The four image/view inconsistency predictors.
//!
//! * `d1`: Euclidean distance between the representations of the input and `G*`.
//! * `d2`: summed KL divergence from the input's class distribution to each view's.
//! * `d3`: log-likelihood of the input under the pixel model, given the predicted label.
//! * `d4`: log-density of the input's representation under the predicted class's mixture.

mod gmm;

pub use gmm::{fit_gmm, fit_mixture, log_sum_exp, GaussianComponent, GmmConfig, GmmModel, Mixture, MixtureFit};

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierModel, ClassifierOutput};
use crate::data::{FlatImage, LabeledSample};
use crate::error::{Error, Result};
use crate::generator::GenerativeModel;
use crate::views::{generate_views, ViewSet};

/// Lower clamp applied to probabilities inside the KL ratio.
pub const KL_FLOOR: f64 = 1e-12;

pub const PREDICTOR_COUNT: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub image_id: String,
    pub label_used: usize,
    pub d: [f64; PREDICTOR_COUNT],
}

impl FeatureVector {
    pub fn d1(&self) -> f64 {
        self.d[0]
    }
    pub fn d2(&self) -> f64 {
        self.d[1]
    }
    pub fn d3(&self) -> f64 {
        self.d[2]
    }
    pub fn d4(&self) -> f64 {
        self.d[3]
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `sum_i p_i ln(p_i / q_i)` with `0 ln 0 = 0` and `q` clamped below at [`KL_FLOOR`].
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::VectorLength(p.len(), q.len()));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.max(KL_FLOOR) / qi.max(KL_FLOOR)).ln())
        .sum::<f64>()
        .max(0.0))
}

/// `||h(image) - h(gstar)||_2`.
pub fn d1(classifier: &ClassifierModel, image: &FlatImage, gstar: &FlatImage) -> Result<f64> {
    let a = classifier.forward(image)?;
    let b = classifier.forward(gstar)?;
    Ok(euclidean(&a.representation, &b.representation))
}

pub fn d2_from_probs(source: &[f64], views: &[&[f64]]) -> Result<f64> {
    views.iter().map(|q| kl(source, q)).sum()
}

/// `sum_{k=1..3} KL(f(z), f(G_k)) + KL(f(z), f(G*))`.
pub fn d2(classifier: &ClassifierModel, image: &FlatImage, views: &ViewSet) -> Result<f64> {
    let p = classifier.forward(image)?.probs;
    let outs = views
        .all()
        .iter()
        .map(|v| classifier.forward(v).map(|o| o.probs))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f64]> = outs.iter().map(|v| v.as_slice()).collect();
    d2_from_probs(&p, &refs)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LikelihoodMode {
    /// `log p(z | F(z))`.
    #[default]
    Conditional,
    /// `log (1/C) sum_y p(z | y)`, an unconditional stand-in from the same model.
    Marginal,
}

pub fn d3(generator: &GenerativeModel, image: &FlatImage, label: usize) -> Result<f64> {
    generator.conditional_log_likelihood(image, label)
}

pub fn d3_with_mode(generator: &GenerativeModel, image: &FlatImage, label: usize, mode: LikelihoodMode) -> Result<f64> {
    match mode {
        LikelihoodMode::Conditional => d3(generator, image, label),
        LikelihoodMode::Marginal => {
            let classes = generator.arch.classes;
            let lls = (0..classes)
                .map(|y| generator.conditional_log_likelihood(image, y))
                .collect::<Result<Vec<_>>>()?;
            Ok(log_sum_exp(&lls) - (classes as f64).ln())
        }
    }
}

/// Log-density of `h(image)` under the mixture of the predicted class.
pub fn d4(gmm: &GmmModel, classifier: &ClassifierModel, image: &FlatImage) -> Result<f64> {
    let out = classifier.forward(image)?;
    gmm.log_density(out.label, &out.representation)
}

/// Representations of `samples`, grouped by their true class.
pub fn representations_by_class(classifier: &ClassifierModel, samples: &[LabeledSample]) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut grouped = vec![Vec::new(); classifier.classes()];
    for s in samples {
        grouped[s.label].push(classifier.forward(&s.image)?.representation);
    }
    Ok(grouped)
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub likelihood: LikelihoodMode,
}

/// Runs the classifier, generates the views under the predicted label, and
/// evaluates all four predictors.
pub fn extract_features(
    classifier: &ClassifierModel,
    generator: &GenerativeModel,
    gmm: &GmmModel,
    image: &FlatImage,
    image_id: &str,
    master_seed: u64,
) -> Result<(FeatureVector, ViewSet)> {
    extract_features_with(classifier, generator, gmm, image, image_id, master_seed, ExtractionConfig::default())
}

pub fn extract_features_with(
    classifier: &ClassifierModel,
    generator: &GenerativeModel,
    gmm: &GmmModel,
    image: &FlatImage,
    image_id: &str,
    master_seed: u64,
    config: ExtractionConfig,
) -> Result<(FeatureVector, ViewSet)> {
    let source: ClassifierOutput = classifier.forward(image)?;
    let label = source.label;
    let views = generate_views(generator, image, label, master_seed)?;
    let outs = views
        .all()
        .iter()
        .map(|v| classifier.forward(v))
        .collect::<Result<Vec<_>>>()?;
    let d1 = euclidean(&source.representation, &outs[3].representation);
    let refs: Vec<&[f64]> = outs.iter().map(|o| o.probs.as_slice()).collect();
    let d2 = d2_from_probs(&source.probs, &refs)?;
    let d3 = d3_with_mode(generator, image, label, config.likelihood)?;
    let d4 = gmm.log_density(label, &source.representation)?;
    Ok((
        FeatureVector {
            image_id: image_id.to_string(),
            label_used: label,
            d: [d1, d2, d3, d4],
        },
        views,
    ))
}

/// Per-predictor z-scoring fitted on benign validation features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; PREDICTOR_COUNT],
    pub std: [f64; PREDICTOR_COUNT],
}

impl Standardizer {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; PREDICTOR_COUNT],
            std: [1.0; PREDICTOR_COUNT],
        }
    }

    pub fn fit(benign: &[[f64; PREDICTOR_COUNT]]) -> Result<Self> {
        if benign.is_empty() {
            return Err(Error::EmptySplit("benign features"));
        }
        let n = benign.len() as f64;
        let mut mean = [0.0; PREDICTOR_COUNT];
        let mut std = [0.0; PREDICTOR_COUNT];
        for j in 0..PREDICTOR_COUNT {
            mean[j] = benign.iter().map(|d| d[j]).sum::<f64>() / n;
            let var = benign.iter().map(|d| (d[j] - mean[j]).powi(2)).sum::<f64>() / n;
            std[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, d: &[f64; PREDICTOR_COUNT]) -> [f64; PREDICTOR_COUNT] {
        std::array::from_fn(|j| (d[j] - self.mean[j]) / self.std[j])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kl_fixtures() {
        assert_eq!(kl(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]).unwrap(), 0.0);
        assert!((kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let expected = 0.5 * (2.0f64 / 3.0).ln() + 0.5 * 2f64.ln();
        assert!((kl(&[0.5, 0.5], &[0.75, 0.25]).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.1438).abs() < 1e-4);
        assert!(kl(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn kl_saturated_is_finite() {
        let v = kl(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn d2_four_term_fixture() {
        let half = [0.5, 0.5];
        let v = d2_from_probs(&[1.0, 0.0], &[&half, &half, &half, &half]).unwrap();
        assert!((v - 4.0 * 2f64.ln()).abs() < 1e-9);
        let same = [0.3, 0.7];
        assert_eq!(d2_from_probs(&same, &[&same, &same, &same, &same]).unwrap(), 0.0);
    }

    #[test]
    fn euclidean_fixture_and_triangle() {
        assert_eq!(euclidean(&[1.0, 2.0], &[4.0, 6.0]), 5.0);
        assert_eq!(euclidean(&[4.0, 6.0], &[1.0, 2.0]), 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let v: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
            assert!(euclidean(&v[0], &v[2]) <= euclidean(&v[0], &v[1]) + euclidean(&v[1], &v[2]) + 1e-12);
        }
    }

    #[test]
    fn standardizer_zscores() {
        let s = Standardizer::fit(&[[1.0, 0.0, 5.0, 2.0], [3.0, 0.0, 7.0, 4.0]]).unwrap();
        assert_eq!(s.apply(&[3.0, 0.0, 5.0, 3.0]), [1.0, 0.0, -1.0, 0.0]);
    }
}
