//! Multi-view regeneration: view `k` keeps the first `k * rows / 4` rows as
//! autoregressive seeds and resamples the next quarter under the predicted
//! label. `G*` splices the three generated quarters under the source's top
//! quarter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FlatImage;
use crate::error::{Error, Result};
use crate::generator::{generate_rows, PixelModel};

pub const VIEW_COUNT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Band {
    /// View index `k` in `1..=3`.
    pub view: usize,
    /// Number of seed rows `m_k`.
    pub seed_rows: usize,
    /// First generated row, 1-indexed.
    pub start: usize,
    /// Last generated row, 1-indexed inclusive.
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandPlan {
    pub rows: usize,
    pub bands: [Band; VIEW_COUNT],
}

pub fn band_plan(rows: usize) -> Result<BandPlan> {
    if rows == 0 || rows % 4 != 0 {
        return Err(Error::RowsNotDivisibleByFour { rows });
    }
    let quarter = rows / 4;
    let band = |k: usize| Band {
        view: k,
        seed_rows: k * quarter,
        start: k * quarter + 1,
        end: (k + 1) * quarter,
    };
    Ok(BandPlan {
        rows,
        bands: [band(1), band(2), band(3)],
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSet {
    pub source: FlatImage,
    pub g1: FlatImage,
    pub g2: FlatImage,
    pub g3: FlatImage,
    pub gstar: FlatImage,
    pub label_used: usize,
    pub rng_seeds: [u64; VIEW_COUNT],
}

impl ViewSet {
    pub fn views(&self) -> [&FlatImage; VIEW_COUNT] {
        [&self.g1, &self.g2, &self.g3]
    }

    /// `G1, G2, G3, G*` in that order.
    pub fn all(&self) -> [&FlatImage; 4] {
        [&self.g1, &self.g2, &self.g3, &self.gstar]
    }
}

/// Per-view seed derived from a master seed, so views can run in any order.
pub fn view_seed(master: u64, k: usize) -> u64 {
    let mut z = master ^ (k as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_view(model: &dyn PixelModel, image: &FlatImage, label: usize, k: usize, seed: u64) -> Result<FlatImage> {
    if !(1..=VIEW_COUNT).contains(&k) {
        return Err(Error::Config(format!("view index {k} outside 1..=3")));
    }
    let plan = band_plan(image.rows())?;
    let band = plan.bands[k - 1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_rows(model, image, label, band.start, band.end, &mut rng)
}

pub fn assemble_gstar(image: &FlatImage, g1: &FlatImage, g2: &FlatImage, g3: &FlatImage) -> Result<FlatImage> {
    for g in [g1, g2, g3] {
        if g.shape() != image.shape() {
            return Err(Error::ShapeMismatch {
                expected: image.shape().to_string(),
                actual: g.shape().to_string(),
            });
        }
    }
    let plan = band_plan(image.rows())?;
    let row = image.row_len();
    let mut out = image.clone();
    for (band, g) in plan.bands.iter().zip([g1, g2, g3]) {
        let range = (band.start - 1) * row..band.end * row;
        out.pixels_mut()[range.clone()].copy_from_slice(&g.pixels()[range]);
    }
    Ok(out)
}

pub fn generate_views_with_seeds(
    model: &dyn PixelModel,
    image: &FlatImage,
    label: usize,
    seeds: [u64; VIEW_COUNT],
    concurrent: bool,
) -> Result<ViewSet> {
    band_plan(image.rows())?;
    let [g1, g2, g3] = if concurrent {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..VIEW_COUNT)
                .map(|i| s.spawn(move || generate_view(model, image, label, i + 1, seeds[i])))
                .collect();
            let mut out = handles.into_iter().map(|h| h.join().expect("view thread panicked"));
            Ok::<_, Error>([out.next().unwrap()?, out.next().unwrap()?, out.next().unwrap()?])
        })?
    } else {
        [
            generate_view(model, image, label, 1, seeds[0])?,
            generate_view(model, image, label, 2, seeds[1])?,
            generate_view(model, image, label, 3, seeds[2])?,
        ]
    };
    let gstar = assemble_gstar(image, &g1, &g2, &g3)?;
    Ok(ViewSet {
        source: image.clone(),
        g1,
        g2,
        g3,
        gstar,
        label_used: label,
        rng_seeds: seeds,
    })
}

pub fn generate_views(model: &dyn PixelModel, image: &FlatImage, label: usize, master_seed: u64) -> Result<ViewSet> {
    let seeds = [1, 2, 3].map(|k| view_seed(master_seed, k));
    generate_views_with_seeds(model, image, label, seeds, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Shape;
    use crate::generator::LEVELS;

    /// Puts all mass on the value the reference image holds at each position.
    struct Echo(FlatImage);

    impl PixelModel for Echo {
        fn shape(&self) -> Shape {
            self.0.shape()
        }
        fn classes(&self) -> usize {
            1
        }
        fn conditional(&self, _image: &FlatImage, _label: usize, index: usize) -> Vec<f64> {
            let mut p = vec![0.0; LEVELS];
            p[self.0.pixels()[index] as usize] = 1.0;
            p
        }
    }

    #[test]
    fn band_plans() {
        let plan = band_plan(32).unwrap();
        let got: Vec<_> = plan.bands.iter().map(|b| (b.seed_rows, b.start, b.end)).collect();
        assert_eq!(got, vec![(8, 9, 16), (16, 17, 24), (24, 25, 32)]);
        let plan = band_plan(8).unwrap();
        let got: Vec<_> = plan.bands.iter().map(|b| (b.seed_rows, b.start, b.end)).collect();
        assert_eq!(got, vec![(2, 3, 4), (4, 5, 6), (6, 7, 8)]);
        assert!(band_plan(6).is_err());
    }

    #[test]
    fn echo_model_views_equal_input() {
        let img = FlatImage::new((0..96).map(|i| (i * 5 % 251) as u8).collect(), 8, 4, 3).unwrap();
        let model = Echo(img.clone());
        let views = generate_views(&model, &img, 0, 11).unwrap();
        for v in views.all() {
            assert_eq!(v, &img);
        }
    }

    #[test]
    fn gstar_of_identical_views_is_identity() {
        let img = FlatImage::new((0..32).map(|i| i as u8).collect(), 8, 4, 1).unwrap();
        assert_eq!(assemble_gstar(&img, &img, &img, &img).unwrap(), img);
        let other = FlatImage::new(vec![0; 16], 4, 4, 1).unwrap();
        assert!(assemble_gstar(&img, &other, &img, &img).is_err());
    }

    #[test]
    fn rejects_bad_view_index() {
        let img = FlatImage::new(vec![0; 16], 4, 4, 1).unwrap();
        let model = Echo(img.clone());
        assert!(generate_view(&model, &img, 0, 0, 1).is_err());
        assert!(generate_view(&model, &img, 0, 4, 1).is_err());
    }
}
