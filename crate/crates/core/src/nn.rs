//! Minimal CPU network primitives with explicit backward passes.
//!
//! Parameters of a model live in one flat `Vec<f64>`; layers only record
//! offsets into it. This keeps checkpoints trivial to serialize and lets a
//! single Adam state cover the whole model.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Channel-major activation volume (`channels x height x width`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_raster(values: &[f64], height: usize, width: usize, channels: usize) -> Self {
        let mut map = Self::zeros(channels, height, width);
        let plane = height * width;
        for p in 0..plane {
            for ch in 0..channels {
                map.data[ch * plane + p] = values[p * channels + ch];
            }
        }
        map
    }

    pub fn to_raster(&self) -> Vec<f64> {
        let plane = self.plane();
        let mut out = vec![0.0; self.data.len()];
        for p in 0..plane {
            for ch in 0..self.channels {
                out[p * self.channels + ch] = self.data[ch * plane + p];
            }
        }
        out
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.channels, self.plane()), &self.data).unwrap()
    }

    pub fn view_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let shape = (self.channels, self.plane());
        ArrayViewMut2::from_shape(shape, &mut self.data).unwrap()
    }

    pub fn relu_inplace(&mut self) {
        for v in &mut self.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Zeroes gradient entries where the forward activation was clamped.
    pub fn relu_backward(&mut self, activation: &FeatureMap) {
        for (g, &a) in self.data.iter_mut().zip(&activation.data) {
            if a <= 0.0 {
                *g = 0.0;
            }
        }
    }

    /// Copies rows `start..end` of every channel.
    pub fn crop_rows(&self, start: usize, end: usize) -> FeatureMap {
        let h = end - start;
        let mut out = FeatureMap::zeros(self.channels, h, self.width);
        for c in 0..self.channels {
            let src = c * self.plane() + start * self.width;
            let dst = c * h * self.width;
            out.data[dst..dst + h * self.width].copy_from_slice(&self.data[src..src + h * self.width]);
        }
        out
    }
}

/// Spatial causal masks for raster-order autoregression at pixel granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvMask {
    None,
    /// Sees strictly earlier pixels only.
    CausalA,
    /// Sees earlier pixels and the current one.
    CausalB,
}

impl ConvMask {
    fn allows(self, ki: usize, kj: usize, center: usize) -> bool {
        match self {
            ConvMask::None => true,
            ConvMask::CausalA => ki < center || (ki == center && kj < center),
            ConvMask::CausalB => ki < center || (ki == center && kj <= center),
        }
    }

    /// Rows above the current one that this mask can reach.
    pub fn reach_up(self, kernel: usize) -> usize {
        kernel / 2
    }
}

/// Allocates parameters and hands out offsets.
#[derive(Debug, Default)]
pub struct ParamBuilder {
    pub values: Vec<f64>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn normal(&mut self, count: usize, std: f64, rng: &mut impl Rng) -> usize {
        let offset = self.values.len();
        let dist = Normal::new(0.0, std).expect("finite std");
        self.values.extend((0..count).map(|_| dist.sample(rng)));
        offset
    }

    pub fn constant(&mut self, count: usize, value: f64) -> usize {
        let offset = self.values.len();
        self.values.resize(offset + count, value);
        offset
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub mask: ConvMask,
    pub weight: usize,
    pub bias: usize,
}

/// Saved state from a convolution forward pass.
pub struct ConvCache {
    cols: Array2<f64>,
    in_h: usize,
    in_w: usize,
}

impl Conv2d {
    pub fn new(
        builder: &mut ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        mask: ConvMask,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let weight = builder.normal(out_ch * in_ch * kernel * kernel, (2.0 / fan_in).sqrt(), rng);
        let bias = builder.constant(out_ch, 0.0);
        let conv = Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            mask,
            weight,
            bias,
        };
        // Masked taps start (and stay) at zero.
        if mask != ConvMask::None {
            let m = conv.mask_row();
            let taps = m.len();
            for o in 0..out_ch {
                for (idx, &keep) in m.iter().enumerate() {
                    if keep == 0.0 {
                        builder.values[weight + o * taps + idx] = 0.0;
                    }
                }
            }
        }
        conv
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * (self.in_ch * self.kernel * self.kernel + 1)
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    /// 0/1 mask over one output filter's `in_ch * k * k` taps.
    fn mask_row(&self) -> Vec<f64> {
        let k = self.kernel;
        let center = k / 2;
        let mut row = Vec::with_capacity(self.in_ch * k * k);
        for _ in 0..self.in_ch {
            for ki in 0..k {
                for kj in 0..k {
                    row.push(if self.mask.allows(ki, kj, center) { 1.0 } else { 0.0 });
                }
            }
        }
        row
    }

    fn weights(&self, params: &[f64]) -> Array2<f64> {
        let taps = self.in_ch * self.kernel * self.kernel;
        let raw = &params[self.weight..self.weight + self.out_ch * taps];
        let mut w = Array2::from_shape_vec((self.out_ch, taps), raw.to_vec()).unwrap();
        if self.mask != ConvMask::None {
            let m = self.mask_row();
            for mut row in w.rows_mut() {
                for (v, &keep) in row.iter_mut().zip(&m) {
                    *v *= keep;
                }
            }
        }
        w
    }

    fn im2col(&self, x: &FeatureMap) -> Array2<f64> {
        let k = self.kernel;
        let p = self.pad() as isize;
        let (oh, ow) = self.out_dims(x.height, x.width);
        let mut cols = Array2::<f64>::zeros((self.in_ch * k * k, oh * ow));
        let plane = x.plane();
        for ci in 0..self.in_ch {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let mut dst = cols.row_mut(row);
                    let dst = dst.as_slice_mut().unwrap();
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + ki as isize - p;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src_row = ci * plane + iy as usize * x.width;
                        for ox in 0..ow {
                            let ix = (ox * self.stride) as isize + kj as isize - p;
                            if ix >= 0 && ix < x.width as isize {
                                dst[oy * ow + ox] = x.data[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, h: usize, w: usize) -> FeatureMap {
        let k = self.kernel;
        let p = self.pad() as isize;
        let (oh, ow) = self.out_dims(h, w);
        let mut dx = FeatureMap::zeros(self.in_ch, h, w);
        let plane = h * w;
        for ci in 0..self.in_ch {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = dcols.row(row);
                    let src = src.as_slice().unwrap();
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + ki as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = ci * plane + iy as usize * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride) as isize + kj as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dx.data[dst_row + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, params: &[f64], x: &FeatureMap) -> (FeatureMap, ConvCache) {
        debug_assert_eq!(x.channels, self.in_ch);
        let cols = self.im2col(x);
        let (oh, ow) = self.out_dims(x.height, x.width);
        let w = self.weights(params);
        let mut y = FeatureMap::zeros(self.out_ch, oh, ow);
        {
            let mut yv = y.view_mut();
            general_mat_mul(1.0, &w, &cols, 0.0, &mut yv);
            let bias = &params[self.bias..self.bias + self.out_ch];
            for (mut row, &b) in yv.rows_mut().into_iter().zip(bias) {
                row.mapv_inplace(|v| v + b);
            }
        }
        (
            y,
            ConvCache {
                cols,
                in_h: x.height,
                in_w: x.width,
            },
        )
    }

    /// Accumulates parameter gradients into `grads` (when given) and returns
    /// the gradient with respect to the input (when `need_input`).
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ConvCache,
        dy: &FeatureMap,
        grads: Option<&mut [f64]>,
        need_input: bool,
    ) -> Option<FeatureMap> {
        let dyv = dy.view();
        if let Some(grads) = grads {
            let taps = self.in_ch * self.kernel * self.kernel;
            let mut dw = Array2::<f64>::zeros((self.out_ch, taps));
            general_mat_mul(1.0, &dyv, &cache.cols.t(), 0.0, &mut dw);
            let m = (self.mask != ConvMask::None).then(|| self.mask_row());
            let gw = &mut grads[self.weight..self.weight + self.out_ch * taps];
            for (o, row) in dw.rows().into_iter().enumerate() {
                for (t, &g) in row.iter().enumerate() {
                    let keep = m.as_ref().map_or(1.0, |m| m[t]);
                    gw[o * taps + t] += g * keep;
                }
            }
            let gb = &mut grads[self.bias..self.bias + self.out_ch];
            for (o, row) in dyv.rows().into_iter().enumerate() {
                gb[o] += row.sum();
            }
        }
        if !need_input {
            return None;
        }
        let w = self.weights(params);
        let mut dcols = Array2::<f64>::zeros(cache.cols.raw_dim());
        general_mat_mul(1.0, &w.t(), &dyv, 0.0, &mut dcols);
        Some(self.col2im(&dcols, cache.in_h, cache.in_w))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn new(builder: &mut ParamBuilder, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = builder.normal(in_dim * out_dim, (1.0 / in_dim as f64).sqrt(), rng);
        let bias = builder.constant(out_dim, 0.0);
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn weight_view<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape(
            (self.out_dim, self.in_dim),
            &params[self.weight..self.weight + self.in_dim * self.out_dim],
        )
        .unwrap()
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let w = &params[self.weight..self.weight + self.in_dim * self.out_dim];
        let b = &params[self.bias..self.bias + self.out_dim];
        (0..self.out_dim)
            .map(|o| {
                let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
                b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], grads: Option<&mut [f64]>) -> Vec<f64> {
        let w = &params[self.weight..self.weight + self.in_dim * self.out_dim];
        if let Some(grads) = grads {
            for o in 0..self.out_dim {
                let gw = &mut grads[self.weight + o * self.in_dim..self.weight + (o + 1) * self.in_dim];
                for (g, &xi) in gw.iter_mut().zip(x) {
                    *g += dy[o] * xi;
                }
                grads[self.bias + o] += dy[o];
            }
        }
        let mut dx = vec![0.0; self.in_dim];
        for o in 0..self.out_dim {
            let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
            for (d, &wi) in dx.iter_mut().zip(row) {
                *d += dy[o] * wi;
            }
        }
        dx
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
