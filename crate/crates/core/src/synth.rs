//! Procedural shape dataset: ten classes of coloured patterns with random
//! placement, scale, colours and pixel noise. A small fraction of images is
//! low-contrast and noisy so that a reasonable classifier still errs on some.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{stratified_split, DatasetSplit, FlatImage, LabeledSample, Shape, SplitFractions};
use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 10] = [
    "disk", "ring", "square", "hbars", "vbars", "diagonal", "plus", "cross", "triangle", "checker",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    pub per_class: usize,
    /// Pixel noise standard deviation in 0-255 units.
    pub noise: f64,
    /// Fraction of images drawn with low contrast and heavy noise.
    pub hard_fraction: f64,
    pub split: SplitFractions,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rows: 16,
            cols: 16,
            per_class: 600,
            noise: 4.0,
            hard_fraction: 0.2,
            split: SplitFractions::default(),
            seed: 0,
        }
    }
}

/// Foreground coverage in `[0, 1]` for `class` at pixel `(r, c)`, given the
/// shape centre, half-size and stripe period.
fn coverage(class: usize, r: f64, c: f64, cy: f64, cx: f64, size: f64, period: f64) -> f64 {
    let (dy, dx) = (r - cy, c - cx);
    let inside_box = dy.abs() <= size && dx.abs() <= size;
    let on = match class {
        0 => dy * dy + dx * dx <= size * size,
        1 => {
            let d = (dy * dy + dx * dx).sqrt();
            d <= size && d >= size * 0.55
        }
        2 => dy.abs() <= size * 0.8 && dx.abs() <= size * 0.8,
        3 => inside_box && (r / period).floor() as i64 % 2 == 0,
        4 => inside_box && (c / period).floor() as i64 % 2 == 0,
        5 => inside_box && ((r + c) / period).floor() as i64 % 2 == 0,
        6 => inside_box && (dy.abs() <= size * 0.3 || dx.abs() <= size * 0.3),
        7 => inside_box && ((dy - dx).abs() <= size * 0.35 || (dy + dx).abs() <= size * 0.35),
        8 => dy <= size && dy >= -size && dx.abs() <= (dy + size) / 2.0,
        9 => inside_box && (((r / period).floor() + (c / period).floor()) as i64) % 2 == 0,
        _ => false,
    };
    if on {
        1.0
    } else {
        0.0
    }
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)]
}

fn brightness(c: &[f64; 3]) -> f64 {
    (c[0] + c[1] + c[2]) / 3.0
}

pub fn render(class: usize, rows: usize, cols: usize, hard: bool, noise: f64, rng: &mut ChaCha8Rng) -> FlatImage {
    let min_dim = rows.min(cols) as f64;
    let cy = rows as f64 / 2.0 - 0.5 + rng.gen_range(-1.5..1.5);
    let cx = cols as f64 / 2.0 - 0.5 + rng.gen_range(-1.5..1.5);
    let size = min_dim * rng.gen_range(0.28..0.42);
    let period = rng.gen_range(1.6..2.6);
    let (lo, hi) = if hard { (6.0, 20.0) } else { (90.0, 255.0) };
    let (fg, bg) = loop {
        let (a, b) = (color(rng), color(rng));
        let gap = (brightness(&a) - brightness(&b)).abs();
        if gap >= lo && gap < hi {
            break (a, b);
        }
    };
    let sigma = if hard { noise * 4.0 } else { noise };
    let normal = Normal::new(0.0, sigma.max(1e-9)).expect("finite sigma");
    let mut pixels = Vec::with_capacity(rows * cols * 3);
    for r in 0..rows {
        for c in 0..cols {
            let m = coverage(class, r as f64, c as f64, cy, cx, size, period);
            for ch in 0..3 {
                let v = bg[ch] + m * (fg[ch] - bg[ch]) + normal.sample(rng);
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    FlatImage::new(pixels, rows, cols, 3).expect("consistent dimensions")
}

/// Renders `per_class` images per class and splits them per class with the
/// configured fractions.
pub fn synthesize(config: &SynthConfig) -> Result<DatasetSplit> {
    if config.rows == 0 || config.rows % 4 != 0 {
        return Err(Error::RowsNotDivisibleByFour { rows: config.rows });
    }
    if config.per_class == 0 {
        return Err(Error::EmptySplit("synthetic dataset"));
    }
    let by_class: Vec<Vec<LabeledSample>> = (0..CLASS_NAMES.len())
        .map(|class| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(31).wrapping_add(class as u64 + 1));
            (0..config.per_class)
                .map(|i| {
                    let hard = rng.gen::<f64>() < config.hard_fraction;
                    LabeledSample {
                        id: format!("{}_{i:05}", CLASS_NAMES[class]),
                        image: render(class, config.rows, config.cols, hard, config.noise, &mut rng),
                        label: class,
                    }
                })
                .collect()
        })
        .collect();
    let mut split = DatasetSplit {
        name: "shapes".into(),
        class_count: CLASS_NAMES.len(),
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        shape: Shape::new(config.rows, config.cols, 3),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    stratified_split(&mut split, by_class, config.split, config.seed)?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_determinism() {
        let config = SynthConfig { per_class: 20, ..SynthConfig::default() };
        let a = synthesize(&config).unwrap();
        assert_eq!(a.counts(), (160, 20, 20));
        assert_eq!(a.train[0].image.shape(), Shape::new(16, 16, 3));
        let b = synthesize(&config).unwrap();
        assert_eq!(a.train[7].image, b.train[7].image);
        assert!(synthesize(&SynthConfig { rows: 6, ..config }).is_err());
    }

    #[test]
    fn classes_differ_in_layout() {
        // same colours and placement, different class -> different coverage
        let masks: Vec<Vec<f64>> = (0..10)
            .map(|k| {
                (0..256)
                    .map(|i| coverage(k, (i / 16) as f64, (i % 16) as f64, 7.5, 7.5, 6.0, 2.0))
                    .collect()
            })
            .collect();
        for a in 0..10 {
            for b in a + 1..10 {
                assert_ne!(masks[a], masks[b], "classes {a} and {b}");
            }
        }
    }
}
