//! Class-conditional autoregressive pixel model.
//!
//! `p(z | y) = prod_i p(z_i | z_<i, y)` over sub-pixels in raster order
//! (channel-minor). A stack of spatially masked convolutions summarizes all
//! strictly earlier pixels; a per-channel head then adds the earlier channels
//! of the current pixel and emits a distribution over the 256 pixel values,
//! either a plain categorical or a discretized logistic mixture. The label
//! enters as a learned per-class bias on every layer.

use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FlatImage, LabeledSample, Shape, DatasetSplit};
use crate::error::{Error, Result};
use crate::nn::{log_softmax, softmax, Adam, Conv2d, ConvCache, ConvMask, FeatureMap, ParamBuilder};
use crate::predictors::log_sum_exp;

pub const LEVELS: usize = 256;

/// A model exposing per-position conditionals in raster order.
pub trait PixelModel: Sync {
    fn shape(&self) -> Shape;

    fn classes(&self) -> usize;

    /// Distribution over the 256 values of sub-pixel `index`. Only
    /// `image.pixels()[..index]` may influence the result.
    fn conditional(&self, image: &FlatImage, label: usize, index: usize) -> Vec<f64>;

    /// Samples every channel of pixel `(row, col)` in place.
    fn sample_pixel_at(&self, work: &mut FlatImage, label: usize, row: usize, col: usize, rng: &mut dyn RngCore) {
        for ch in 0..work.channels() {
            let index = work.index(row, col, ch);
            let probs = self.conditional(work, label, index);
            work.pixels_mut()[index] = sample_categorical(&probs, rng);
        }
    }
}

/// Inverse-CDF draw from a discrete distribution over pixel values.
pub fn sample_categorical(probs: &[f64], rng: &mut dyn RngCore) -> u8 {
    let u: f64 = rng.gen::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (v, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = v;
            acc += p;
            if u < acc {
                return v as u8;
            }
        }
    }
    last_positive as u8
}

/// Draws the value of sub-pixel `prefix.len()` given the earlier sub-pixels.
pub fn sample_pixel(model: &dyn PixelModel, prefix: &[u8], label: usize, rng: &mut dyn RngCore) -> Result<u8> {
    let shape = model.shape();
    if prefix.len() >= shape.len() {
        return Err(Error::InvalidShape(format!(
            "prefix of length {} leaves no position to sample in {shape}",
            prefix.len()
        )));
    }
    let mut pixels = prefix.to_vec();
    pixels.resize(shape.len(), 0);
    let image = FlatImage::new(pixels, shape.rows, shape.cols, shape.channels)?;
    let probs = model.conditional(&image, label, prefix.len());
    Ok(sample_categorical(&probs, rng))
}

/// Resamples rows `r_start..=r_end` (1-indexed) left to right, top to bottom.
/// Rows outside the band are copied from `image`; rows below the band never
/// enter the autoregressive context.
pub fn generate_rows(
    model: &dyn PixelModel,
    image: &FlatImage,
    label: usize,
    r_start: usize,
    r_end: usize,
    rng: &mut dyn RngCore,
) -> Result<FlatImage> {
    if r_start == 0 || r_start > r_end || r_end > image.rows() {
        return Err(Error::InvalidBand {
            start: r_start,
            end: r_end,
            rows: image.rows(),
        });
    }
    if image.shape() != model.shape() {
        return Err(Error::ShapeMismatch {
            expected: model.shape().to_string(),
            actual: image.shape().to_string(),
        });
    }
    if label >= model.classes() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: model.classes(),
        });
    }
    let mut work = image.clone();
    for row in r_start - 1..r_end {
        for col in 0..image.cols() {
            model.sample_pixel_at(&mut work, label, row, col, rng);
        }
    }
    Ok(work)
}

/// Output distribution of each sub-pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Discretization {
    /// 256 free logits.
    Categorical,
    /// Mixture of logistics over `[-1, 1]`, integrated over each value's bin.
    Logistic { components: usize },
}

impl Discretization {
    fn outputs(&self) -> usize {
        match self {
            Self::Categorical => LEVELS,
            Self::Logistic { components } => 3 * components,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub hidden: usize,
    /// Number of causal residual layers after the first masked layer.
    pub layers: usize,
    pub head_hidden: usize,
    pub discretization: Discretization,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub temperature: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            layers: 4,
            head_hidden: 64,
            discretization: Discretization::Logistic { components: 5 },
            epochs: 6,
            batch_size: 16,
            learning_rate: 2e-3,
            seed: 0,
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub input: Shape,
    pub classes: usize,
    pub hidden: usize,
    pub layers: usize,
    pub head_hidden: usize,
    pub discretization: Discretization,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    pub epochs: usize,
    pub seed: u64,
    pub train_bits_per_dim: f64,
    pub test_bits_per_dim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ChannelHead {
    /// `head_hidden x hidden`
    features: usize,
    /// `head_hidden x channel` (earlier channels of the same pixel)
    earlier: usize,
    bias: usize,
    /// `classes x head_hidden`
    class_bias: usize,
    /// `outputs x head_hidden`
    out: usize,
    out_bias: usize,
    channel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeModel {
    pub arch: GeneratorArch,
    first: Conv2d,
    blocks: Vec<Conv2d>,
    /// One `classes x hidden` table per conv layer (first, then blocks).
    class_bias: Vec<usize>,
    heads: Vec<ChannelHead>,
    pub params: Vec<f64>,
    pub temperature: f64,
    pub meta: GeneratorMeta,
}

struct StackTrace {
    first: ConvCache,
    /// Post-activation output of every layer; `acts[0]` is the first layer.
    acts: Vec<FeatureMap>,
    /// Residual branch post-relu for each block.
    branches: Vec<FeatureMap>,
    caches: Vec<ConvCache>,
}

struct HeadTrace {
    prev: Array2<f64>,
    hid: Array2<f64>,
    logits: Array2<f64>,
}

#[inline]
fn to_input(v: f64) -> f64 {
    2.0 * v - 1.0
}

impl GenerativeModel {
    pub fn new(input: Shape, classes: usize, config: &GeneratorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = ParamBuilder::new();
        let h = config.hidden;
        let first = Conv2d::new(&mut b, input.channels, h, 3, 1, ConvMask::CausalA, &mut rng);
        let mut class_bias = vec![b.constant(classes * h, 0.0)];
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let conv = Conv2d::new(&mut b, h, h, 3, 1, ConvMask::CausalB, &mut rng);
            for w in &mut b.values[conv.weight..conv.weight + h * h * 9] {
                *w *= 0.5;
            }
            blocks.push(conv);
            class_bias.push(b.constant(classes * h, 0.0));
        }
        let hh = config.head_hidden;
        let outputs = config.discretization.outputs();
        let heads = (0..input.channels)
            .map(|channel| {
                let head = ChannelHead {
                    features: b.normal(hh * h, (2.0 / h as f64).sqrt(), &mut rng),
                    earlier: b.normal(hh * channel, 1.0, &mut rng),
                    bias: b.constant(hh, 0.0),
                    class_bias: b.constant(classes * hh, 0.0),
                    out: b.normal(outputs * hh, 0.01, &mut rng),
                    out_bias: b.constant(outputs, 0.0),
                    channel,
                };
                if let Discretization::Logistic { components: k } = config.discretization {
                    // spread the component means, start with moderately wide scales
                    for j in 0..k {
                        b.values[head.out_bias + k + j] = -0.8 + 1.6 * j as f64 / (k.max(2) - 1) as f64;
                        b.values[head.out_bias + 2 * k + j] = -1.5;
                    }
                }
                head
            })
            .collect();
        Self {
            arch: GeneratorArch {
                input,
                classes,
                hidden: h,
                layers: config.layers,
                head_hidden: hh,
                discretization: config.discretization,
            },
            first,
            blocks,
            class_bias,
            heads,
            params: b.values,
            temperature: config.temperature,
            meta: GeneratorMeta {
                seed: config.seed,
                ..GeneratorMeta::default()
            },
        }
    }

    /// All parameters zero: every conditional is uniform over 256 values.
    pub fn uniform(input: Shape, classes: usize) -> Self {
        let config = GeneratorConfig {
            hidden: 4,
            layers: 1,
            head_hidden: 4,
            discretization: Discretization::Categorical,
            ..GeneratorConfig::default()
        };
        let mut model = Self::new(input, classes, &config);
        model.params.fill(0.0);
        model
    }

    /// Rows above the current one that influence its features.
    pub fn reach(&self) -> usize {
        1 + self.blocks.len()
    }

    fn stack(&self, x: &FeatureMap, label: usize) -> StackTrace {
        let p = &self.params;
        let h = self.arch.hidden;
        let add_class = |map: &mut FeatureMap, table: usize| {
            let bias = &p[table + label * h..table + (label + 1) * h];
            let plane = map.plane();
            for (c, chunk) in map.data.chunks_mut(plane).enumerate() {
                for v in chunk {
                    *v += bias[c];
                }
            }
        };
        let (mut a, first) = self.first.forward(p, x);
        add_class(&mut a, self.class_bias[0]);
        a.relu_inplace();
        let mut acts = vec![a];
        let mut branches = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (l, conv) in self.blocks.iter().enumerate() {
            let prev = acts.last().unwrap();
            let (mut u, cache) = conv.forward(p, prev);
            add_class(&mut u, self.class_bias[l + 1]);
            u.relu_inplace();
            let mut next = prev.clone();
            next.add_assign(&u);
            branches.push(u);
            caches.push(cache);
            acts.push(next);
        }
        StackTrace {
            first,
            acts,
            branches,
            caches,
        }
    }

    fn pview(&self, offset: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.params[offset..offset + rows * cols]).unwrap()
    }

    /// Head forward for one channel over a set of positions.
    /// `feats`: `hidden x P`; `prev`: `channel x P` (model-input units).
    fn head_forward(&self, head: &ChannelHead, feats: &ArrayView2<f64>, prev: Array2<f64>, label: usize) -> HeadTrace {
        let hh = self.arch.head_hidden;
        let p_count = feats.ncols();
        let mut pre = Array2::<f64>::zeros((hh, p_count));
        general_mat_mul(1.0, &self.pview(head.features, hh, self.arch.hidden), feats, 0.0, &mut pre);
        if head.channel > 0 {
            general_mat_mul(1.0, &self.pview(head.earlier, hh, head.channel), &prev, 1.0, &mut pre);
        }
        let bias = &self.params[head.bias..head.bias + hh];
        let cb = &self.params[head.class_bias + label * hh..head.class_bias + (label + 1) * hh];
        for (j, mut row) in pre.rows_mut().into_iter().enumerate() {
            let b = bias[j] + cb[j];
            row.mapv_inplace(|v| (v + b).max(0.0));
        }
        let hid = pre;
        let outputs = self.arch.discretization.outputs();
        let mut logits = Array2::<f64>::zeros((outputs, p_count));
        general_mat_mul(1.0, &self.pview(head.out, outputs, hh), &hid, 0.0, &mut logits);
        let ob = &self.params[head.out_bias..head.out_bias + outputs];
        for (v, mut row) in logits.rows_mut().into_iter().enumerate() {
            let b = ob[v];
            row.mapv_inplace(|z| z + b);
        }
        HeadTrace { prev, hid, logits }
    }

    fn earlier_channels(&self, x: &[f64], channel: usize, positions: impl Iterator<Item = usize> + Clone) -> Array2<f64> {
        let c = self.arch.input.channels;
        let count = positions.clone().count();
        let mut prev = Array2::<f64>::zeros((channel, count));
        for (j, pos) in positions.enumerate() {
            for k in 0..channel {
                prev[(k, j)] = to_input(x[pos * c + k]);
            }
        }
        prev
    }

    fn check(&self, image: &FlatImage, label: usize) -> Result<()> {
        if image.shape() != self.arch.input {
            return Err(Error::ShapeMismatch {
                expected: self.arch.input.to_string(),
                actual: image.shape().to_string(),
            });
        }
        if label >= self.arch.classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.arch.classes,
            });
        }
        Ok(())
    }

    /// Log-likelihood (nats) of a normalized image and optionally its gradient
    /// with respect to the normalized input and/or the parameters.
    ///
    /// Targets are the pixel values `round(255 x)`; the gradient flows through
    /// the autoregressive context only.
    fn evaluate(&self, x: &[f64], label: usize, grads: Option<&mut [f64]>, need_input: bool) -> (f64, Option<Vec<f64>>) {
        let s = self.arch.input;
        let c = s.channels;
        let plane = s.rows * s.cols;
        let input = FeatureMap::from_raster(&x.iter().map(|&v| to_input(v)).collect::<Vec<_>>(), s.rows, s.cols, c);
        let trace = self.stack(&input, label);
        let feats = trace.acts.last().unwrap();
        let fview = feats.view();
        let targets: Vec<usize> = x.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as usize).collect();

        let want_backward = grads.is_some() || need_input;
        let mut total = 0.0;
        let mut dfeats = want_backward.then(|| Array2::<f64>::zeros((self.arch.hidden, plane)));
        let mut dinput_direct = need_input.then(|| vec![0.0; x.len()]);
        let mut grads = grads;
        for head in &self.heads {
            let prev = self.earlier_channels(x, head.channel, 0..plane);
            let ht = self.head_forward(head, &fview, prev, label);
            let outputs = self.arch.discretization.outputs();
            let mut dlogits = want_backward.then(|| Array2::<f64>::zeros((outputs, plane)));
            for pos in 0..plane {
                let col: Vec<f64> = ht.logits.column(pos).to_vec();
                let t = targets[pos * c + head.channel];
                let (ll, d) = value_log_prob(self.arch.discretization, &col, t, want_backward);
                total += ll;
                if let Some(dl) = dlogits.as_mut() {
                    for (v, dv) in d.into_iter().enumerate() {
                        dl[(v, pos)] = dv;
                    }
                }
            }
            if let Some(dlogits) = dlogits {
                let hh = self.arch.head_hidden;
                let mut dhid = Array2::<f64>::zeros((hh, plane));
                general_mat_mul(1.0, &self.pview(head.out, outputs, hh).t(), &dlogits, 0.0, &mut dhid);
                for (d, &a) in dhid.iter_mut().zip(ht.hid.iter()) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
                if let Some(g) = grads.as_deref_mut() {
                    let mut dout = Array2::<f64>::zeros((outputs, hh));
                    general_mat_mul(1.0, &dlogits, &ht.hid.t(), 0.0, &mut dout);
                    for (gi, v) in g[head.out..head.out + outputs * hh].iter_mut().zip(dout.iter()) {
                        *gi += v;
                    }
                    for (v, row) in dlogits.rows().into_iter().enumerate() {
                        g[head.out_bias + v] += row.sum();
                    }
                    let mut dfw = Array2::<f64>::zeros((hh, self.arch.hidden));
                    general_mat_mul(1.0, &dhid, &fview.t(), 0.0, &mut dfw);
                    for (gi, v) in g[head.features..head.features + hh * self.arch.hidden].iter_mut().zip(dfw.iter()) {
                        *gi += v;
                    }
                    if head.channel > 0 {
                        let mut dew = Array2::<f64>::zeros((hh, head.channel));
                        general_mat_mul(1.0, &dhid, &ht.prev.t(), 0.0, &mut dew);
                        for (gi, v) in g[head.earlier..head.earlier + hh * head.channel].iter_mut().zip(dew.iter()) {
                            *gi += v;
                        }
                    }
                    for (j, row) in dhid.rows().into_iter().enumerate() {
                        let sum = row.sum();
                        g[head.bias + j] += sum;
                        g[head.class_bias + label * hh + j] += sum;
                    }
                }
                if let Some(df) = dfeats.as_mut() {
                    general_mat_mul(1.0, &self.pview(head.features, hh, self.arch.hidden).t(), &dhid, 1.0, df);
                }
                if let (Some(dd), true) = (dinput_direct.as_mut(), head.channel > 0) {
                    let mut dprev = Array2::<f64>::zeros((head.channel, plane));
                    general_mat_mul(1.0, &self.pview(head.earlier, hh, head.channel).t(), &dhid, 0.0, &mut dprev);
                    for pos in 0..plane {
                        for k in 0..head.channel {
                            dd[pos * c + k] += 2.0 * dprev[(k, pos)];
                        }
                    }
                }
            }
        }
        let Some(dfeats) = dfeats else {
            return (total, None);
        };

        // stack backward
        let h = self.arch.hidden;
        let mut d = FeatureMap {
            channels: h,
            height: s.rows,
            width: s.cols,
            data: dfeats.into_raw_vec_and_offset().0,
        };
        let class_grad = |g: &mut [f64], table: usize, dm: &FeatureMap| {
            for (ch, chunk) in dm.data.chunks(dm.plane()).enumerate() {
                g[table + label * h + ch] += chunk.iter().sum::<f64>();
            }
        };
        for l in (0..self.blocks.len()).rev() {
            let mut du = d.clone();
            du.relu_backward(&trace.branches[l]);
            if let Some(g) = grads.as_deref_mut() {
                class_grad(g, self.class_bias[l + 1], &du);
            }
            let dprev = self.blocks[l]
                .backward(&self.params, &trace.caches[l], &du, grads.as_deref_mut(), true)
                .unwrap();
            d.add_assign(&dprev);
        }
        d.relu_backward(&trace.acts[0]);
        if let Some(g) = grads.as_deref_mut() {
            class_grad(g, self.class_bias[0], &d);
        }
        let dx = self.first.backward(&self.params, &trace.first, &d, grads, need_input);
        let input_grad = dx.map(|dx| {
            let mut out = dx.to_raster();
            for v in &mut out {
                *v *= 2.0;
            }
            if let Some(direct) = dinput_direct {
                for (o, dd) in out.iter_mut().zip(direct) {
                    *o += dd;
                }
            }
            out
        });
        (total, input_grad)
    }

    /// `sum_i log p(z_i | z_<i, label)` in nats.
    pub fn conditional_log_likelihood(&self, image: &FlatImage, label: usize) -> Result<f64> {
        self.check(image, label)?;
        Ok(self.evaluate(&image.normalized(), label, None, false).0)
    }

    /// Log-likelihood of a normalized input and its gradient with respect to it.
    pub fn log_likelihood_gradient(&self, x: &[f64], label: usize) -> (f64, Vec<f64>) {
        let (ll, g) = self.evaluate(x, label, None, true);
        (ll, g.expect("input gradient requested"))
    }

    pub fn bits_per_dim(&self, samples: &[LabeledSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::EmptySplit("samples"));
        }
        let mut total = 0.0;
        let mut dims = 0usize;
        for s in samples {
            total += self.conditional_log_likelihood(&s.image, s.label)?;
            dims += s.image.len();
        }
        Ok(nats_to_bits_per_dim(total, dims))
    }

    /// Features at `(row, col)` computed on the smallest exact crop.
    fn features_at(&self, x: &[f64], label: usize, row: usize, col: usize) -> Vec<f64> {
        let s = self.arch.input;
        let reach = self.reach();
        let r0 = row.saturating_sub(reach);
        let c0 = col.saturating_sub(reach);
        let c1 = (col + reach + 1).min(s.cols);
        let (h, w) = (row - r0 + 1, c1 - c0);
        let c = s.channels;
        let mut crop = FeatureMap::zeros(c, h, w);
        for rr in 0..h {
            for cc in 0..w {
                let base = ((r0 + rr) * s.cols + c0 + cc) * c;
                for ch in 0..c {
                    crop.data[ch * h * w + rr * w + cc] = to_input(x[base + ch]);
                }
            }
        }
        let trace = self.stack(&crop, label);
        let feats = trace.acts.last().unwrap();
        let pos = (h - 1) * w + (col - c0);
        (0..self.arch.hidden).map(|k| feats.data[k * h * w + pos]).collect()
    }

    fn channel_probs(&self, feats: &[f64], x: &[f64], label: usize, pos: usize, channel: usize) -> Vec<f64> {
        let head = &self.heads[channel];
        let fview = ArrayView2::from_shape((self.arch.hidden, 1), feats).unwrap();
        let prev = self.earlier_channels(x, channel, std::iter::once(pos));
        let ht = self.head_forward(head, &fview, prev, label);
        let t = self.temperature.max(1e-6);
        let col: Vec<f64> = ht.logits.column(0).to_vec();
        let logp: Vec<f64> = value_log_probs(self.arch.discretization, &col).iter().map(|z| z / t).collect();
        softmax(&logp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}

impl PixelModel for GenerativeModel {
    fn shape(&self) -> Shape {
        self.arch.input
    }

    fn classes(&self) -> usize {
        self.arch.classes
    }

    fn conditional(&self, image: &FlatImage, label: usize, index: usize) -> Vec<f64> {
        let c = self.arch.input.channels;
        let pos = index / c;
        let (row, col) = (pos / self.arch.input.cols, pos % self.arch.input.cols);
        let x = image.normalized();
        let feats = self.features_at(&x, label, row, col);
        self.channel_probs(&feats, &x, label, pos, index % c)
    }

    fn sample_pixel_at(&self, work: &mut FlatImage, label: usize, row: usize, col: usize, rng: &mut dyn RngCore) {
        let mut x = work.normalized();
        let feats = self.features_at(&x, label, row, col);
        let pos = row * self.arch.input.cols + col;
        for ch in 0..self.arch.input.channels {
            let probs = self.channel_probs(&feats, &x, label, pos, ch);
            let v = sample_categorical(&probs, rng);
            let index = work.index(row, col, ch);
            work.pixels_mut()[index] = v;
            x[index] = v as f64 / 255.0;
        }
    }
}

fn softplus(a: f64) -> f64 {
    if a > 30.0 {
        a
    } else {
        a.exp().ln_1p()
    }
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

const MIN_LOG_SCALE: f64 = -7.0;

/// Log-probability of value `t` under one logistic with mean `mu` and log
/// scale `ls` on `[-1, 1]`, and its partials with respect to `mu` and `ls`.
fn logistic_bin(t: usize, mu: f64, ls: f64) -> (f64, f64, f64) {
    let inv = (-ls).exp();
    let centre = 2.0 * t as f64 / 255.0 - 1.0;
    let half = 1.0 / 255.0;
    let plus = inv * (centre + half - mu);
    let minus = inv * (centre - half - mu);
    // d(a)/d(mu) = -inv and d(a)/d(ls) = -a for a = inv * (u - mu)
    if t == 0 {
        let d = sigmoid(-plus);
        return (plus - softplus(plus), -inv * d, -plus * d);
    }
    if t == LEVELS - 1 {
        let d = -sigmoid(minus);
        return (-softplus(minus), -inv * d, -minus * d);
    }
    let delta = if minus > 0.0 {
        sigmoid(-minus) - sigmoid(-plus)
    } else {
        sigmoid(plus) - sigmoid(minus)
    };
    if delta > 1e-10 {
        let dp = sigmoid(plus) * sigmoid(-plus) / delta;
        let dm = -sigmoid(minus) * sigmoid(-minus) / delta;
        (delta.ln(), -inv * (dp + dm), -(plus * dp + minus * dm))
    } else {
        // density at the bin centre times the bin width
        let mid = inv * (centre - mu);
        let lp = mid - 2.0 * softplus(mid) + (2.0 * half * inv).ln();
        let d = 1.0 - 2.0 * sigmoid(mid);
        (lp, -inv * d, -mid * d - 1.0)
    }
}

/// Log-probability of pixel value `t` given the head outputs of one position
/// and, if requested, its gradient with respect to those outputs.
fn value_log_prob(disc: Discretization, outputs: &[f64], t: usize, want_grad: bool) -> (f64, Vec<f64>) {
    match disc {
        Discretization::Categorical => {
            let lsm = log_softmax(outputs);
            let grad = if want_grad {
                let mut d: Vec<f64> = lsm.iter().map(|l| -l.exp()).collect();
                d[t] += 1.0;
                d
            } else {
                Vec::new()
            };
            (lsm[t], grad)
        }
        Discretization::Logistic { components: k } => {
            let log_pi = log_softmax(&outputs[..k]);
            let parts: Vec<(f64, f64, f64)> = (0..k)
                .map(|j| logistic_bin(t, outputs[k + j], outputs[2 * k + j].max(MIN_LOG_SCALE)))
                .collect();
            let joint: Vec<f64> = (0..k).map(|j| log_pi[j] + parts[j].0).collect();
            let total = log_sum_exp(&joint);
            if !want_grad {
                return (total, Vec::new());
            }
            let mut d = vec![0.0; 3 * k];
            for j in 0..k {
                let r = (joint[j] - total).exp();
                d[j] = r - log_pi[j].exp();
                d[k + j] = r * parts[j].1;
                if outputs[2 * k + j] > MIN_LOG_SCALE {
                    d[2 * k + j] = r * parts[j].2;
                }
            }
            (total, d)
        }
    }
}

/// Log-probabilities of all 256 values for one position.
fn value_log_probs(disc: Discretization, outputs: &[f64]) -> Vec<f64> {
    match disc {
        Discretization::Categorical => log_softmax(outputs),
        Discretization::Logistic { components: k } => {
            let pi = softmax(&outputs[..k]);
            let mut probs = vec![0.0; LEVELS];
            for j in 0..k {
                let (mu, inv) = (outputs[k + j], (-outputs[2 * k + j].max(MIN_LOG_SCALE)).exp());
                let mut below = 0.0;
                for (t, p) in probs.iter_mut().enumerate() {
                    let above = if t == LEVELS - 1 {
                        1.0
                    } else {
                        sigmoid(inv * ((2 * t + 1) as f64 / 255.0 - 1.0 - mu))
                    };
                    *p += pi[j] * (above - below);
                    below = above;
                }
            }
            // bins whose mass underflows the cdf difference use the exact path
            probs
                .iter()
                .enumerate()
                .map(|(t, &p)| if p > 1e-10 { p.ln() } else { value_log_prob(disc, outputs, t, false).0 })
                .collect()
        }
    }
}

pub fn nats_to_bits_per_dim(log_likelihood: f64, dims: usize) -> f64 {
    -log_likelihood / (dims as f64 * std::f64::consts::LN_2)
}

pub fn train_generator(data: &DatasetSplit, config: &GeneratorConfig) -> Result<GenerativeModel> {
    if data.train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let mut model = GenerativeModel::new(data.shape, data.class_count, config);
    let inputs: Vec<(Vec<f64>, usize)> = data.train.iter().map(|s| (s.image.normalized(), s.label)).collect();
    let dims = data.shape.len();
    let mut adam = Adam::new(model.params.len(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(17));
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut grads = vec![0.0; model.params.len()];
    let mut train_bpd = f64::NAN;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        adam.lr = config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / config.epochs as f64).cos());
        let mut epoch_ll = 0.0;
        for (step, batch) in order.chunks(config.batch_size.max(1)).enumerate() {
            grads.fill(0.0);
            let mut batch_ll = 0.0;
            for &i in batch {
                let (x, y) = &inputs[i];
                let (ll, _) = model.evaluate(x, *y, Some(&mut grads), false);
                batch_ll += ll;
            }
            if !batch_ll.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: -batch_ll,
                });
            }
            // minimize mean NLL per dimension
            let scale = -1.0 / (batch.len() * dims) as f64;
            for g in &mut grads {
                *g *= scale;
            }
            adam.step(&mut model.params, &grads);
            epoch_ll += batch_ll;
        }
        train_bpd = nats_to_bits_per_dim(epoch_ll, inputs.len() * dims);
        log::info!("generator epoch {}/{}: {:.3} bits/dim", epoch + 1, config.epochs, train_bpd);
    }
    model.meta = GeneratorMeta {
        epochs: config.epochs,
        seed: config.seed,
        train_bits_per_dim: train_bpd,
        test_bits_per_dim: if data.test.is_empty() {
            f64::NAN
        } else {
            model.bits_per_dim(&data.test)?
        },
    };
    log::info!("generator trained: test {:.3} bits/dim", model.meta.test_bits_per_dim);
    Ok(model)
}
