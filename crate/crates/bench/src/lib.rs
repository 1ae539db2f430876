//! Fixtures shared by the benchmarks: untrained models at the desk shape
//! and random inputs. Timings depend on architecture, not on weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use viewguard::classifier::{ClassifierConfig, ClassifierModel};
use viewguard::data::{FlatImage, Shape};
use viewguard::generator::{GenerativeModel, GeneratorConfig};

pub const DESK_SHAPE: Shape = Shape { rows: 16, cols: 16, channels: 3 };
pub const CLASSES: usize = 10;

pub fn random_image(seed: u64) -> FlatImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = DESK_SHAPE;
    FlatImage::new((0..s.len()).map(|_| rng.gen()).collect(), s.rows, s.cols, s.channels).unwrap()
}

pub fn classifier() -> ClassifierModel {
    ClassifierModel::new(DESK_SHAPE, CLASSES, &ClassifierConfig::default())
}

pub fn generator() -> GenerativeModel {
    GenerativeModel::new(DESK_SHAPE, CLASSES, &GeneratorConfig::default())
}

/// `n` random points in the four-predictor feature space around `center`.
pub fn feature_cloud(n: usize, center: f64, seed: u64) -> Vec<[f64; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| std::array::from_fn(|_| center + rng.gen_range(-1.0..1.0))).collect()
}
