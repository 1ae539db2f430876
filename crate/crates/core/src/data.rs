//! Dataset ingestion, raster-order flattening and row-band addressing.
//!
//! Images are stored at rest as `u8` sub-pixels in raster order: rows top to
//! bottom, pixels left to right within a row, channels innermost. The flat
//! index of grid entry `(r, c, ch)` is `(r * cols + c) * channels + ch`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale factor between stored pixels and the `[0, 1]` network input space.
pub const PIXEL_SCALE: f64 = 255.0;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlatImage {
    pixels: Vec<u8>,
    rows: usize,
    cols: usize,
    channels: usize,
}

impl FlatImage {
    pub fn new(pixels: Vec<u8>, rows: usize, cols: usize, channels: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || channels == 0 {
            return Err(Error::InvalidShape(format!(
                "{rows}x{cols}x{channels} has a zero dimension"
            )));
        }
        let expected = rows * cols * channels;
        if pixels.len() != expected {
            return Err(Error::LengthMismatch {
                rows,
                cols,
                channels,
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            pixels,
            rows,
            cols,
            channels,
        })
    }

    /// Builds an image from integer values, rejecting anything outside `[0, 255]`.
    pub fn from_values(values: &[i64], rows: usize, cols: usize, channels: usize) -> Result<Self> {
        let pixels = values
            .iter()
            .enumerate()
            .map(|(index, &value)| {
                u8::try_from(value).map_err(|_| Error::PixelOutOfRange { index, value })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pixels, rows, cols, channels)
    }

    /// Rounds a normalized `[0, 1]` buffer back to stored pixels.
    pub fn from_normalized(values: &[f64], shape: Shape) -> Result<Self> {
        let pixels = values
            .iter()
            .map(|v| (v * PIXEL_SCALE).round().clamp(0.0, 255.0) as u8)
            .collect();
        Self::new(pixels, shape.rows, shape.cols, shape.channels)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn shape(&self) -> Shape {
        Shape {
            rows: self.rows,
            cols: self.cols,
            channels: self.channels,
        }
    }

    /// Number of sub-pixels in one raster row.
    pub fn row_len(&self) -> usize {
        self.cols * self.channels
    }

    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.cols + col) * self.channels + channel
    }

    pub fn normalized(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / PIXEL_SCALE).collect()
    }

    pub fn require_quarter_rows(&self) -> Result<()> {
        if self.rows % 4 != 0 {
            return Err(Error::RowsNotDivisibleByFour { rows: self.rows });
        }
        Ok(())
    }

    pub fn linf_distance(&self, other: &FlatImage) -> u8 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| a.abs_diff(b))
            .max()
            .unwrap_or(0)
    }

    /// Euclidean distance in 0–255 pixel units.
    pub fn l2_distance(&self, other: &FlatImage) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize, channels: usize) -> Self {
        Self {
            rows,
            cols,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.rows, self.cols, self.channels)
    }
}

/// Flattens a `rows x cols x channels` grid into raster order.
pub fn flatten_raster(grid: &Array3<i64>) -> Result<FlatImage> {
    let (rows, cols, channels) = grid.dim();
    // Standard-layout iteration of an (r, c, ch) array is exactly raster order.
    let values: Vec<i64> = grid.iter().copied().collect();
    FlatImage::from_values(&values, rows, cols, channels)
}

pub fn unflatten(image: &FlatImage) -> Array3<i64> {
    let values = image.pixels.iter().map(|&p| p as i64).collect();
    Array3::from_shape_vec((image.rows, image.cols, image.channels), values)
        .expect("FlatImage length always matches its shape")
}

/// Contiguous raster slice covering rows `r_start..=r_end` (1-indexed).
pub fn row_band(image: &FlatImage, r_start: usize, r_end: usize) -> Result<&[u8]> {
    if r_start == 0 || r_start > r_end || r_end > image.rows {
        return Err(Error::InvalidBand {
            start: r_start,
            end: r_end,
            rows: image.rows,
        });
    }
    let row_len = image.row_len();
    Ok(&image.pixels[(r_start - 1) * row_len..r_end * row_len])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub id: String,
    pub image: FlatImage,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitKind::Train),
            "val" => Some(SplitKind::Val),
            "test" => Some(SplitKind::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: String,
    pub class_count: usize,
    pub class_names: Vec<String>,
    pub shape: Shape,
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl DatasetSplit {
    pub fn split(&self, kind: SplitKind) -> &[LabeledSample] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    /// `(sample-id, split)` rows in train, val, test order.
    pub fn manifest(&self) -> Vec<(String, SplitKind)> {
        [SplitKind::Train, SplitKind::Val, SplitKind::Test]
            .into_iter()
            .flat_map(|kind| self.split(kind).iter().map(move |s| (s.id.clone(), kind)))
            .collect()
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut out = String::from("sample_id\tsplit\n");
        for (id, kind) in self.manifest() {
            out.push_str(&format!("{id}\t{}\n", kind.as_str()));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, SplitKind>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let (id, split) = line
            .split_once('\t')
            .ok_or_else(|| Error::Config(format!("manifest line {}: expected two columns", lineno + 1)))?;
        let kind = SplitKind::parse(split.trim())
            .ok_or_else(|| Error::Config(format!("manifest line {}: unknown split `{split}`", lineno + 1)))?;
        map.insert(id.to_string(), kind);
    }
    Ok(map)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    /// One directory per class holding PNG files.
    #[default]
    PngDirs,
    /// The CIFAR-10 binary distribution (`data_batch_*.bin`, `test_batch.bin`).
    Cifar10Bin,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub path: PathBuf,
    #[serde(default)]
    pub format: DatasetFormat,
    pub class_count: usize,
    /// Class directory names; defaults to `0`, `1`, ... when absent.
    #[serde(default)]
    pub classes: Option<Vec<String>>,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default)]
    pub seed: u64,
    /// Optional explicit split list overriding the fractions.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub per_class_limit: Option<usize>,
    #[serde(default)]
    pub name: Option<String>,
}

impl DatasetConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: DatasetConfig = toml::from_str(&text)?;
        if let Some(parent) = path.parent() {
            if config.path.is_relative() {
                config.path = parent.join(&config.path);
            }
            if let Some(m) = config.manifest.as_mut().filter(|m| m.is_relative()) {
                *m = parent.join(&*m);
            }
        }
        Ok(config)
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes
            .clone()
            .unwrap_or_else(|| (0..self.class_count).map(|c| c.to_string()).collect())
    }
}

/// Shuffles each class with its own seeded stream and appends the train, val
/// and test portions to `split`.
pub fn stratified_split(split: &mut DatasetSplit, by_class: Vec<Vec<LabeledSample>>, f: SplitFractions, seed: u64) -> Result<()> {
    let total = f.train + f.val + f.test;
    if !(total > 0.0) || f.train < 0.0 || f.val < 0.0 || f.test < 0.0 {
        return Err(Error::Config(format!("invalid split fractions {f:?}")));
    }
    for (class, mut samples) in by_class.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        samples.shuffle(&mut rng);
        let n = samples.len();
        let n_train = (((n as f64) * f.train / total).round() as usize).min(n);
        let n_val = (((n as f64) * f.val / total).round() as usize).min(n - n_train);
        let mut iter = samples.into_iter();
        split.train.extend(iter.by_ref().take(n_train));
        split.val.extend(iter.by_ref().take(n_val));
        split.test.extend(iter);
    }
    Ok(())
}

pub fn load_dataset(config: &DatasetConfig) -> Result<DatasetSplit> {
    let class_names = config.class_names();
    if class_names.len() != config.class_count {
        return Err(Error::Config(format!(
            "{} class names declared for class_count {}",
            class_names.len(),
            config.class_count
        )));
    }
    let mut by_class = match config.format {
        DatasetFormat::PngDirs => read_png_dirs(&config.path, &class_names)?,
        DatasetFormat::Cifar10Bin => read_cifar10(&config.path, config.class_count)?,
    };
    if let Some(limit) = config.per_class_limit {
        for samples in &mut by_class {
            samples.truncate(limit);
        }
    }

    let shape = by_class
        .iter()
        .flatten()
        .next()
        .map(|s| s.image.shape())
        .ok_or(Error::EmptySplit("dataset"))?;
    for sample in by_class.iter().flatten() {
        if sample.image.shape() != shape {
            return Err(Error::NonUniformDimensions(format!(
                "{} is {}, expected {shape}",
                sample.id,
                sample.image.shape()
            )));
        }
    }
    if shape.rows % 4 != 0 {
        return Err(Error::RowsNotDivisibleByFour { rows: shape.rows });
    }

    let name = config.name.clone().unwrap_or_else(|| {
        config
            .path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let mut split = DatasetSplit {
        name,
        class_count: config.class_count,
        class_names,
        shape,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };

    if let Some(manifest_path) = &config.manifest {
        let manifest = read_manifest(manifest_path)?;
        for sample in by_class.into_iter().flatten() {
            match manifest.get(&sample.id) {
                Some(SplitKind::Train) => split.train.push(sample),
                Some(SplitKind::Val) => split.val.push(sample),
                Some(SplitKind::Test) => split.test.push(sample),
                None => {}
            }
        }
    } else {
        stratified_split(&mut split, by_class, config.split, config.seed)?;
    }
    log::info!(
        "loaded {}: {} train / {} val / {} test ({} classes, {})",
        split.name,
        split.train.len(),
        split.val.len(),
        split.test.len(),
        split.class_count,
        split.shape
    );
    Ok(split)
}

fn read_png_dirs(root: &Path, class_names: &[String]) -> Result<Vec<Vec<LabeledSample>>> {
    let mut by_class = Vec::with_capacity(class_names.len());
    for (label, class) in class_names.iter().enumerate() {
        let dir = root.join(class);
        if !dir.is_dir() {
            return Err(Error::MissingClass(class.clone()));
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        let mut samples = Vec::with_capacity(files.len());
        for file in files {
            let stem = file.file_stem().unwrap_or_default().to_string_lossy();
            samples.push(LabeledSample {
                id: format!("{class}/{stem}"),
                image: load_png(&file)?,
                label,
            });
        }
        by_class.push(samples);
    }
    Ok(by_class)
}

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

fn read_cifar10(root: &Path, class_count: usize) -> Result<Vec<Vec<LabeledSample>>> {
    let mut files: Vec<PathBuf> = (1..=5)
        .map(|i| root.join(format!("data_batch_{i}.bin")))
        .chain(std::iter::once(root.join("test_batch.bin")))
        .filter(|p| p.is_file())
        .collect();
    if files.is_empty() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no CIFAR-10 batch files"),
        ));
    }
    files.sort();
    let mut by_class = vec![Vec::new(); class_count];
    for file in files {
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::InvalidShape(format!(
                "{} is not a whole number of CIFAR records",
                file.display()
            )));
        }
        let batch = file.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        for (i, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = record[0] as usize;
            if label >= class_count {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: class_count,
                });
            }
            let plane = CIFAR_SIDE * CIFAR_SIDE;
            // Stored channel-major; convert to channel-minor raster order.
            let mut pixels = vec![0u8; 3 * plane];
            for p in 0..plane {
                for ch in 0..3 {
                    pixels[p * 3 + ch] = record[1 + ch * plane + p];
                }
            }
            by_class[label].push(LabeledSample {
                id: format!("{batch}/{i}"),
                image: FlatImage::new(pixels, CIFAR_SIDE, CIFAR_SIDE, 3)?,
                label,
            });
        }
    }
    Ok(by_class)
}

pub fn load_png(path: &Path) -> Result<FlatImage> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        image::DynamicImage::ImageLuma8(buf) => FlatImage::new(buf.into_raw(), h, w, 1),
        other => FlatImage::new(other.to_rgb8().into_raw(), h, w, 3),
    }
}

pub fn save_png(image: &FlatImage, path: &Path) -> Result<()> {
    let color = match image.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => {
            return Err(Error::InvalidShape(format!(
                "cannot encode {c}-channel image as PNG"
            )))
        }
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image::save_buffer(path, &image.pixels, image.cols as u32, image.rows as u32, color)?;
    Ok(())
}

/// Writes every sample as `<root>/<class>/<id-stem>.png` plus a split manifest.
pub fn write_png_dataset(split: &DatasetSplit, root: &Path) -> Result<()> {
    let mut seen = HashSet::new();
    let mut manifest = String::from("sample_id\tsplit\n");
    for kind in [SplitKind::Train, SplitKind::Val, SplitKind::Test] {
        for sample in split.split(kind) {
            let class = &split.class_names[sample.label];
            let stem = sample.id.rsplit('/').next().unwrap_or(&sample.id);
            let path = root.join(class).join(format!("{stem}.png"));
            if !seen.insert(path.clone()) {
                return Err(Error::Config(format!("duplicate sample path {}", path.display())));
            }
            save_png(&sample.image, &path)?;
            // ids as the loader will assign them
            manifest.push_str(&format!("{class}/{stem}\t{}\n", kind.as_str()));
        }
    }
    let manifest_path = root.join("split_manifest.tsv");
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    let config = DatasetConfig {
        path: PathBuf::from("."),
        format: DatasetFormat::PngDirs,
        class_count: split.class_count,
        classes: Some(split.class_names.clone()),
        split: SplitFractions::default(),
        seed: 0,
        manifest: Some(PathBuf::from("split_manifest.tsv")),
        per_class_limit: None,
        name: Some(split.name.clone()),
    };
    let path = root.join("dataset.toml");
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let text = toml::to_string(&config).map_err(|e| Error::Config(e.to_string()))?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(())
}
