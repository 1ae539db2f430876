//! The victim classifier: a small residual convolutional network.
//!
//! Exposes class probabilities, the post-pooling penultimate representation,
//! the argmax label and vector-Jacobian products with respect to the input,
//! which is all the attacks and predictors need.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, FlatImage, LabeledSample, Shape};
use crate::error::{Error, Result};
use crate::nn::{argmax, softmax, Adam, Conv2d, ConvCache, ConvMask, FeatureMap, Linear, ParamBuilder};

/// Anything attacks can differentiate through: logits over normalized raster inputs.
pub trait Victim {
    fn num_classes(&self) -> usize;

    fn input_len(&self) -> usize;

    fn logits(&self, x: &[f64]) -> Vec<f64>;

    /// Returns `(logits, d<dlogits, logits>/dx)` where `dlogits` is produced
    /// from the logits by the supplied closure.
    fn logits_vjp(&self, x: &[f64], dlogits: &mut dyn FnMut(&[f64]) -> Vec<f64>) -> (Vec<f64>, Vec<f64>);

    fn probs(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    /// Cross-entropy loss and its input gradient.
    fn loss_and_gradient(&self, x: &[f64], label: usize) -> (f64, Vec<f64>) {
        let mut loss = 0.0;
        let (_, grad) = self.logits_vjp(x, &mut |logits| {
            let mut p = softmax(logits);
            loss = -p[label].max(1e-300).ln();
            p[label] -= 1.0;
            p
        });
        (loss, grad)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub representation: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub input: Shape,
    pub classes: usize,
    pub stem_width: usize,
    pub mid_width: usize,
    /// Width of the pooled representation h(z).
    pub rep_dim: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub stem_width: usize,
    pub mid_width: usize,
    pub rep_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            stem_width: 16,
            mid_width: 32,
            rep_dim: 64,
            epochs: 12,
            batch_size: 32,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub seed: u64,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Layers {
    stem: Conv2d,
    block1_a: Conv2d,
    block1_b: Conv2d,
    down1: Conv2d,
    block2_a: Conv2d,
    block2_b: Conv2d,
    down2: Conv2d,
    head: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub arch: ClassifierArch,
    layers: Layers,
    pub params: Vec<f64>,
    pub meta: TrainingMeta,
}

struct Trace {
    input: FeatureMap,
    stem: (ConvCache, FeatureMap),
    b1a: (ConvCache, FeatureMap),
    b1b: ConvCache,
    r1: FeatureMap,
    down1: (ConvCache, FeatureMap),
    b2a: (ConvCache, FeatureMap),
    b2b: ConvCache,
    r3: FeatureMap,
    down2: (ConvCache, FeatureMap),
    rep: Vec<f64>,
    logits: Vec<f64>,
}

impl ClassifierModel {
    pub fn new(input: Shape, classes: usize, config: &ClassifierConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = ParamBuilder::new();
        let (c0, c1, c2, c3) = (input.channels, config.stem_width, config.mid_width, config.rep_dim);
        let conv = |b: &mut ParamBuilder, i, o, s, rng: &mut ChaCha8Rng| Conv2d::new(b, i, o, 3, s, ConvMask::None, rng);
        let layers = Layers {
            stem: conv(&mut b, c0, c1, 1, &mut rng),
            block1_a: conv(&mut b, c1, c1, 1, &mut rng),
            block1_b: conv(&mut b, c1, c1, 1, &mut rng),
            down1: conv(&mut b, c1, c2, 2, &mut rng),
            block2_a: conv(&mut b, c2, c2, 1, &mut rng),
            block2_b: conv(&mut b, c2, c2, 1, &mut rng),
            down2: conv(&mut b, c2, c3, 2, &mut rng),
            head: Linear::new(&mut b, c3, classes, &mut rng),
        };
        // Residual branches start near identity.
        for conv in [&layers.block1_b, &layers.block2_b] {
            let n = conv.out_ch * conv.in_ch * 9;
            for w in &mut b.values[conv.weight..conv.weight + n] {
                *w *= 0.1;
            }
        }
        Self {
            arch: ClassifierArch {
                input,
                classes,
                stem_width: c1,
                mid_width: c2,
                rep_dim: c3,
            },
            layers,
            params: b.values,
            meta: TrainingMeta {
                seed: config.seed,
                ..TrainingMeta::default()
            },
        }
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn rep_dim(&self) -> usize {
        self.arch.rep_dim
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.arch.input.len() {
            return Err(Error::ShapeMismatch {
                expected: self.arch.input.to_string(),
                actual: format!("{len} values"),
            });
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let s = self.arch.input;
        let p = &self.params;
        let l = &self.layers;
        let input = FeatureMap::from_raster(x, s.rows, s.cols, s.channels);

        let conv_relu = |conv: &Conv2d, x: &FeatureMap| {
            let (mut y, cache) = conv.forward(p, x);
            y.relu_inplace();
            (cache, y)
        };
        let stem = conv_relu(&l.stem, &input);
        let b1a = conv_relu(&l.block1_a, &stem.1);
        let (u1, b1b) = l.block1_b.forward(p, &b1a.1);
        let mut r1 = stem.1.clone();
        r1.add_assign(&u1);
        r1.relu_inplace();
        let down1 = conv_relu(&l.down1, &r1);
        let b2a = conv_relu(&l.block2_a, &down1.1);
        let (u2, b2b) = l.block2_b.forward(p, &b2a.1);
        let mut r3 = down1.1.clone();
        r3.add_assign(&u2);
        r3.relu_inplace();
        let down2 = conv_relu(&l.down2, &r3);
        let fm = &down2.1;
        let plane = fm.plane() as f64;
        let rep: Vec<f64> = fm.data.chunks(fm.plane()).map(|c| c.iter().sum::<f64>() / plane).collect();
        let logits = l.head.forward(p, &rep);
        Trace {
            input,
            stem,
            b1a,
            b1b,
            r1,
            down1,
            b2a,
            b2b,
            r3,
            down2,
            rep,
            logits,
        }
    }

    /// Backpropagates `dlogits` (and optionally a representation gradient).
    fn backward(
        &self,
        t: &Trace,
        dlogits: &[f64],
        drep: Option<&[f64]>,
        mut grads: Option<&mut [f64]>,
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let p = &self.params;
        let l = &self.layers;
        let mut dr = l.head.backward(p, &t.rep, dlogits, grads.as_deref_mut());
        if let Some(extra) = drep {
            for (a, b) in dr.iter_mut().zip(extra) {
                *a += b;
            }
        }
        let fm = &t.down2.1;
        let plane = fm.plane();
        let mut d = FeatureMap::zeros(fm.channels, fm.height, fm.width);
        for (c, chunk) in d.data.chunks_mut(plane).enumerate() {
            chunk.fill(dr[c] / plane as f64);
        }
        d.relu_backward(fm);
        let mut d = l.down2.backward(p, &t.down2.0, &d, grads.as_deref_mut(), true).unwrap();
        // residual block 2
        d.relu_backward(&t.r3);
        let mut db = l.block2_b.backward(p, &t.b2b, &d, grads.as_deref_mut(), true).unwrap();
        db.relu_backward(&t.b2a.1);
        let da = l.block2_a.backward(p, &t.b2a.0, &db, grads.as_deref_mut(), true).unwrap();
        d.add_assign(&da);
        d.relu_backward(&t.down1.1);
        let mut d = l.down1.backward(p, &t.down1.0, &d, grads.as_deref_mut(), true).unwrap();
        // residual block 1
        d.relu_backward(&t.r1);
        let mut db = l.block1_b.backward(p, &t.b1b, &d, grads.as_deref_mut(), true).unwrap();
        db.relu_backward(&t.b1a.1);
        let da = l.block1_a.backward(p, &t.b1a.0, &db, grads.as_deref_mut(), true).unwrap();
        d.add_assign(&da);
        d.relu_backward(&t.stem.1);
        let dx = l.stem.backward(p, &t.stem.0, &d, grads, need_input)?;
        debug_assert_eq!(dx.channels, t.input.channels);
        Some(dx.to_raster())
    }

    /// Forward pass on a normalized `[0, 1]` raster vector.
    pub fn forward_normalized(&self, x: &[f64]) -> Result<ClassifierOutput> {
        self.check_len(x.len())?;
        let t = self.trace(x);
        let probs = softmax(&t.logits);
        Ok(ClassifierOutput {
            label: argmax(&t.logits),
            logits: t.logits,
            probs,
            representation: t.rep,
        })
    }

    pub fn forward(&self, image: &FlatImage) -> Result<ClassifierOutput> {
        if image.shape() != self.arch.input {
            return Err(Error::ShapeMismatch {
                expected: self.arch.input.to_string(),
                actual: image.shape().to_string(),
            });
        }
        self.forward_normalized(&image.normalized())
    }

    pub fn predict_image(&self, image: &FlatImage) -> Result<usize> {
        Ok(self.forward(image)?.label)
    }

    /// Gradient of the cross-entropy loss with respect to the normalized input.
    pub fn loss_gradient(&self, x: &[f64], label: usize) -> Result<Vec<f64>> {
        self.check_len(x.len())?;
        if label >= self.classes() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.classes(),
            });
        }
        Ok(self.loss_and_gradient(x, label).1)
    }

    /// Input gradient of `<dlogits, Z(x)> + <drep, h(x)>`, plus the forward output.
    pub fn input_vjp(&self, x: &[f64], dlogits: &[f64], drep: Option<&[f64]>) -> (ClassifierOutput, Vec<f64>) {
        let t = self.trace(x);
        let grad = self.backward(&t, dlogits, drep, None, true).unwrap();
        let probs = softmax(&t.logits);
        (
            ClassifierOutput {
                label: argmax(&t.logits),
                logits: t.logits.clone(),
                probs,
                representation: t.rep.clone(),
            },
            grad,
        )
    }

    pub fn accuracy(&self, samples: &[LabeledSample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let correct = samples
            .iter()
            .filter(|s| self.forward(&s.image).map(|o| o.label == s.label).unwrap_or(false))
            .count();
        correct as f64 / samples.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}

impl Victim for ClassifierModel {
    fn num_classes(&self) -> usize {
        self.arch.classes
    }

    fn input_len(&self) -> usize {
        self.arch.input.len()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).logits
    }

    fn logits_vjp(&self, x: &[f64], dlogits: &mut dyn FnMut(&[f64]) -> Vec<f64>) -> (Vec<f64>, Vec<f64>) {
        let t = self.trace(x);
        let d = dlogits(&t.logits);
        let grad = self.backward(&t, &d, None, None, true).unwrap();
        (t.logits, grad)
    }
}

pub fn train_classifier(data: &DatasetSplit, config: &ClassifierConfig) -> Result<ClassifierModel> {
    if data.train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let mut model = ClassifierModel::new(data.shape, data.class_count, config);
    let inputs: Vec<(Vec<f64>, usize)> = data.train.iter().map(|s| (s.image.normalized(), s.label)).collect();
    let mut adam = Adam::new(model.params.len(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut grads = vec![0.0; model.params.len()];
    let mut last_loss = f64::NAN;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        // cosine decay
        adam.lr = config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / config.epochs as f64).cos());
        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        for (step, batch) in order.chunks(config.batch_size.max(1)).enumerate() {
            grads.fill(0.0);
            let mut batch_loss = 0.0;
            for &i in batch {
                let (x, y) = &inputs[i];
                let t = model.trace(x);
                let mut p = softmax(&t.logits);
                if argmax(&p) == *y {
                    correct += 1;
                }
                batch_loss += -p[*y].max(1e-300).ln();
                p[*y] -= 1.0;
                for v in &mut p {
                    *v /= batch.len() as f64;
                }
                model.backward(&t, &p, None, Some(&mut grads), false);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: batch_loss,
                });
            }
            adam.step(&mut model.params, &grads);
            epoch_loss += batch_loss;
        }
        last_loss = epoch_loss / inputs.len() as f64;
        log::info!(
            "classifier epoch {}/{}: loss {:.4}, train acc {:.3}",
            epoch + 1,
            config.epochs,
            last_loss,
            correct as f64 / inputs.len() as f64
        );
    }
    model.meta = TrainingMeta {
        epochs: config.epochs,
        seed: config.seed,
        final_loss: last_loss,
        train_accuracy: model.accuracy(&data.train),
        val_accuracy: model.accuracy(&data.val),
        test_accuracy: model.accuracy(&data.test),
    };
    log::info!(
        "classifier trained: val acc {:.3}, test acc {:.3}",
        model.meta.val_accuracy,
        model.meta.test_accuracy
    );
    Ok(model)
}

/// Affine classifier `Z(x) = W x + b`; used as an analytic fixture for attacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// Row-major `classes x inputs`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearModel {
    pub fn new(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Self {
        assert_eq!(weights.len(), bias.len());
        Self { weights, bias }
    }

    /// Two-class model whose logit difference `Z_0 - Z_1` equals `w.x + b`.
    pub fn binary(w: &[f64], b: f64) -> Self {
        Self::new(vec![w.to_vec(), vec![0.0; w.len()]], vec![b, 0.0])
    }
}

impl Victim for LinearModel {
    fn num_classes(&self) -> usize {
        self.bias.len()
    }

    fn input_len(&self) -> usize {
        self.weights[0].len()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    fn logits_vjp(&self, x: &[f64], dlogits: &mut dyn FnMut(&[f64]) -> Vec<f64>) -> (Vec<f64>, Vec<f64>) {
        let logits = self.logits(x);
        let d = dlogits(&logits);
        let mut grad = vec![0.0; x.len()];
        for (w, &dk) in self.weights.iter().zip(&d) {
            for (g, &wi) in grad.iter_mut().zip(w) {
                *g += dk * wi;
            }
        }
        (logits, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(seed: u64) -> ClassifierModel {
        let config = ClassifierConfig {
            stem_width: 4,
            mid_width: 6,
            rep_dim: 8,
            seed,
            ..ClassifierConfig::default()
        };
        ClassifierModel::new(Shape::new(8, 8, 3), 3, &config)
    }

    #[test]
    fn probabilities_normalized_and_deterministic() {
        let model = tiny_model(1);
        let x: Vec<f64> = (0..192).map(|i| (i % 17) as f64 / 16.0).collect();
        let a = model.forward_normalized(&x).unwrap();
        let b = model.forward_normalized(&x).unwrap();
        assert_eq!(a, b);
        assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(a.probs.iter().all(|&p| p >= 0.0));
        assert_eq!(a.representation.len(), 8);
        assert_eq!(a.label, argmax(&a.probs));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let model = tiny_model(1);
        let img = FlatImage::new(vec![0; 16], 4, 4, 1).unwrap();
        assert!(matches!(model.forward(&img), Err(Error::ShapeMismatch { .. })));
        assert!(model.loss_gradient(&[0.0; 5], 0).is_err());
        assert!(model.loss_gradient(&vec![0.0; 192], 7).is_err());
    }

    #[test]
    fn linear_gradient_sign_follows_weights() {
        // Class-1 logit is w.x; for true class 0 the loss grows along +w.
        let w = [0.5, -2.0, 1.5, -0.1];
        let model = LinearModel::new(vec![vec![0.0; 4], w.to_vec()], vec![0.0, 0.0]);
        let (_, g) = model.loss_and_gradient(&[0.1, 0.2, 0.3, 0.4], 0);
        for (gi, wi) in g.iter().zip(&w) {
            assert_eq!(gi.signum(), wi.signum());
        }
    }

    #[test]
    fn rep_vjp_matches_finite_difference() {
        let model = tiny_model(5);
        let x: Vec<f64> = (0..192).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let drep: Vec<f64> = (0..8).map(|i| (i as f64 - 3.5) / 4.0).collect();
        let zeros = vec![0.0; 3];
        let (_, g) = model.input_vjp(&x, &zeros, Some(&drep));
        let f = |v: &[f64]| -> f64 {
            let o = model.forward_normalized(v).unwrap();
            o.representation.iter().zip(&drep).map(|(a, b)| a * b).sum()
        };
        let mut probe = x.clone();
        for &i in &[0usize, 17, 64, 100, 191] {
            probe[i] = x[i] + 1e-6;
            let up = f(&probe);
            probe[i] = x[i] - 1e-6;
            let down = f(&probe);
            probe[i] = x[i];
            let num = (up - down) / 2e-6;
            assert!((num - g[i]).abs() <= 1e-6 + 1e-4 * num.abs(), "coord {i}: {num} vs {}", g[i]);
        }
    }
}
