//! Class-conditional diagonal-covariance Gaussian mixtures fit by EM.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Diagonal of the covariance matrix.
    pub variance: Vec<f64>,
}

impl GaussianComponent {
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((&xi, &m), &v) in x.iter().zip(&self.mean).zip(&self.variance) {
            let d = xi - m;
            acc += d * d / v + v.ln() + LN_2PI;
        }
        -0.5 * acc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub components: Vec<GaussianComponent>,
}

impl Mixture {
    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    /// `log sum_k w_k N(x; mu_k, diag(var_k))`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.weight.ln() + c.log_density(x))
            .collect();
        log_sum_exp(&terms)
    }

    /// Log-density and its gradient with respect to `x`.
    pub fn log_density_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.weight.ln() + c.log_density(x))
            .collect();
        let total = log_sum_exp(&terms);
        let mut grad = vec![0.0; x.len()];
        for (c, &t) in self.components.iter().zip(&terms) {
            let r = (t - total).exp();
            for (g, ((&xi, &m), &v)) in grad.iter_mut().zip(x.iter().zip(&c.mean).zip(&c.variance)) {
                *g -= r * (xi - m) / v;
            }
        }
        (total, grad)
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    /// One mixture per class.
    pub classes: Vec<Mixture>,
}

impl GmmModel {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn log_density(&self, class: usize, x: &[f64]) -> Result<f64> {
        let mix = self.classes.get(class).ok_or(Error::LabelOutOfRange {
            label: class,
            classes: self.classes.len(),
        })?;
        if x.len() != mix.dim() {
            return Err(Error::VectorLength(x.len(), mix.dim()));
        }
        Ok(mix.log_density(x))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmConfig {
    pub components: usize,
    pub max_iterations: usize,
    /// Stop once the mean log-likelihood improves by less than this.
    pub tolerance: f64,
    /// Added to every variance to keep covariances positive definite.
    pub variance_floor: f64,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            components: 8,
            max_iterations: 200,
            tolerance: 1e-4,
            variance_floor: 1e-6,
            seed: 0,
        }
    }
}

/// Result of fitting one mixture, with the EM trace.
#[derive(Clone, Debug)]
pub struct MixtureFit {
    pub mixture: Mixture,
    /// Mean log-likelihood after each EM iteration.
    pub history: Vec<f64>,
}

fn kmeans_init(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    // k-means++ seeding followed by a few Lloyd iterations
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut centers = vec![data.choose(rng).unwrap().clone()];
    while centers.len() < k {
        let d: Vec<f64> = data
            .iter()
            .map(|x| centers.iter().map(|c| dist2(x, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut u = rand::Rng::gen::<f64>(rng) * total;
            let mut pick = data.len() - 1;
            for (i, &di) in d.iter().enumerate() {
                if u < di {
                    pick = i;
                    break;
                }
                u -= di;
            }
            pick
        } else {
            rand::Rng::gen_range(rng, 0..data.len())
        };
        centers.push(data[next].clone());
    }
    for _ in 0..10 {
        let mut sums = vec![vec![0.0; data[0].len()]; k];
        let mut counts = vec![0usize; k];
        for x in data {
            let best = (0..k)
                .min_by(|&a, &b| dist2(x, &centers[a]).total_cmp(&dist2(x, &centers[b])))
                .unwrap();
            counts[best] += 1;
            for (s, v) in sums[best].iter_mut().zip(x) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    centers
}

pub fn fit_mixture(data: &[Vec<f64>], config: &GmmConfig, seed: u64) -> Result<MixtureFit> {
    let k = config.components.max(1);
    let n = data.len();
    if n < k {
        return Err(Error::InsufficientData(format!("{n} samples for {k} components")));
    }
    let dim = data[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeans_init(data, k, &mut rng);

    // global variance as the starting spread
    let mean: Vec<f64> = (0..dim).map(|j| data.iter().map(|x| x[j]).sum::<f64>() / n as f64).collect();
    let var: Vec<f64> = (0..dim)
        .map(|j| data.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n as f64 + config.variance_floor)
        .collect();
    let mut mix = Mixture {
        components: centers
            .into_iter()
            .map(|c| GaussianComponent {
                weight: 1.0 / k as f64,
                mean: c,
                variance: var.clone(),
            })
            .collect(),
    };

    let mut resp = vec![vec![0.0; k]; n];
    let mut history = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..config.max_iterations {
        // E-step
        let mut ll = 0.0;
        for (x, r) in data.iter().zip(resp.iter_mut()) {
            for (j, c) in mix.components.iter().enumerate() {
                r[j] = c.weight.ln() + c.log_density(x);
            }
            let lse = log_sum_exp(r);
            ll += lse;
            for v in r.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let mean_ll = ll / n as f64;
        // M-step
        for (j, c) in mix.components.iter_mut().enumerate() {
            let nk: f64 = resp.iter().map(|r| r[j]).sum::<f64>();
            let nk_safe = nk.max(1e-12);
            c.weight = (nk / n as f64).max(1e-12);
            for d in 0..dim {
                c.mean[d] = data.iter().zip(&resp).map(|(x, r)| r[j] * x[d]).sum::<f64>() / nk_safe;
            }
            for d in 0..dim {
                c.variance[d] = data
                    .iter()
                    .zip(&resp)
                    .map(|(x, r)| r[j] * (x[d] - c.mean[d]).powi(2))
                    .sum::<f64>()
                    / nk_safe
                    + config.variance_floor;
            }
        }
        let wsum: f64 = mix.components.iter().map(|c| c.weight).sum();
        for c in &mut mix.components {
            c.weight /= wsum;
        }
        history.push(mean_ll);
        if (mean_ll - prev).abs() < config.tolerance {
            break;
        }
        prev = mean_ll;
    }
    Ok(MixtureFit { mixture: mix, history })
}

/// Fits one mixture per class from `(representation, class)` pairs grouped by class.
pub fn fit_gmm(grouped: &[Vec<Vec<f64>>], config: &GmmConfig) -> Result<GmmModel> {
    let mut classes = Vec::with_capacity(grouped.len());
    for (class, data) in grouped.iter().enumerate() {
        if data.len() < config.components {
            return Err(Error::TooFewSamples {
                class,
                have: data.len(),
                need: config.components,
            });
        }
        let fit = fit_mixture(data, config, config.seed.wrapping_add(class as u64))?;
        classes.push(fit.mixture);
    }
    Ok(GmmModel { classes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn single_component_closed_form() {
        let data = vec![vec![-1.0], vec![1.0]];
        let config = GmmConfig {
            components: 1,
            variance_floor: 0.0,
            ..GmmConfig::default()
        };
        let fit = fit_mixture(&data, &config, 0).unwrap();
        let c = &fit.mixture.components[0];
        assert!(c.mean[0].abs() < 1e-12);
        assert!((c.variance[0] - 1.0).abs() < 1e-12);
        assert!((c.weight - 1.0).abs() < 1e-12);
    }

    #[test]
    fn standard_normal_density_at_mean() {
        let mix = Mixture {
            components: vec![GaussianComponent {
                weight: 1.0,
                mean: vec![0.0],
                variance: vec![1.0],
            }],
        };
        assert!((mix.log_density(&[0.0]) + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn em_is_monotone_and_weights_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<Vec<f64>> = (0..300)
            .map(|i| {
                let c = (i % 3) as f64 * 4.0;
                vec![c + rng.gen_range(-1.0..1.0), -c + rng.gen_range(-1.0..1.0)]
            })
            .collect();
        let config = GmmConfig {
            components: 4,
            tolerance: 0.0,
            max_iterations: 60,
            ..GmmConfig::default()
        };
        let fit = fit_mixture(&data, &config, 1).unwrap();
        for w in fit.history.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
        }
        let wsum: f64 = fit.mixture.components.iter().map(|c| c.weight).sum();
        assert!((wsum - 1.0).abs() < 1e-12);
        assert!(fit.mixture.components.iter().all(|c| c.variance.iter().all(|&v| v > 0.0)));
    }

    #[test]
    fn too_few_samples_rejected() {
        let grouped = vec![vec![vec![0.0]; 10], vec![vec![0.0]; 3]];
        assert!(matches!(
            fit_gmm(&grouped, &GmmConfig::default()),
            Err(Error::TooFewSamples { class: 1, have: 3, need: 8 })
        ));
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let mix = Mixture {
            components: vec![
                GaussianComponent { weight: 0.3, mean: vec![0.0, 1.0], variance: vec![1.0, 0.5] },
                GaussianComponent { weight: 0.7, mean: vec![2.0, -1.0], variance: vec![0.7, 2.0] },
            ],
        };
        let x = [0.8, 0.1];
        let (_, g) = mix.log_density_gradient(&x);
        for i in 0..2 {
            let mut up = x;
            up[i] += 1e-6;
            let mut down = x;
            down[i] -= 1e-6;
            let num = (mix.log_density(&up) - mix.log_density(&down)) / 2e-6;
            assert!((num - g[i]).abs() < 1e-7);
        }
    }
}
