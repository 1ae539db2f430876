//! Adversarial example generators: FGSM, PGD, MIM, DeepFool, C&W-L2 and an
//! adaptive white-box attack that also keeps the detector's likelihood
//! predictors benign-looking.
//!
//! All attacks work on normalized `[0, 1]` inputs. The final image is rounded
//! back to integer pixels and, for L-infinity families, re-projected onto the
//! integer epsilon ball.

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierModel, Victim};
use crate::data::{FlatImage, LabeledSample, PIXEL_SCALE};
use crate::error::{Error, Result};
use crate::generator::GenerativeModel;
use crate::nn::{argmax, softmax, Adam};
use crate::predictors::GmmModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackFamily {
    Fgsm,
    Pgd,
    Mim,
    Deepfool,
    Cw,
    Whitebox,
}

impl AttackFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Fgsm => "fgsm",
            Self::Pgd => "pgd",
            Self::Mim => "mim",
            Self::Deepfool => "deepfool",
            Self::Cw => "cw",
            Self::Whitebox => "whitebox",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "fgsm" => Self::Fgsm,
            "pgd" => Self::Pgd,
            "mim" => Self::Mim,
            "deepfool" => Self::Deepfool,
            "cw" => Self::Cw,
            "whitebox" => Self::Whitebox,
            _ => return None,
        })
    }

    pub fn norm(&self) -> Norm {
        match self {
            Self::Deepfool | Self::Cw => Norm::L2,
            _ => Norm::Linf,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Norm {
    Linf,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub family: AttackFamily,
    /// Budget in 0-255 pixel units; ignored by the L2 families.
    pub epsilon: f64,
    pub iterations: usize,
    /// Step size in pixel units; `None` means `epsilon / iterations`.
    pub step: Option<f64>,
    /// Momentum decay; `1.0` accumulates normalized gradients without decay.
    pub momentum_decay: f64,
    pub confidence: f64,
    pub cw_search_steps: usize,
    pub cw_iterations: usize,
    pub cw_learning_rate: f64,
    pub cw_initial_c: f64,
    pub overshoot: f64,
    pub deepfool_iterations: usize,
    pub wb_alpha: f64,
    pub wb_beta: f64,
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(family: AttackFamily, epsilon: f64) -> Self {
        Self {
            family,
            epsilon,
            iterations: if family == AttackFamily::Fgsm { 1 } else { 40 },
            step: None,
            momentum_decay: 1.0,
            confidence: 0.5,
            cw_search_steps: 5,
            cw_iterations: 100,
            cw_learning_rate: 0.01,
            cw_initial_c: 1.0,
            overshoot: 0.02,
            deepfool_iterations: 50,
            wb_alpha: 1.0,
            wb_beta: 1.0,
            seed: 0,
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self::new(AttackFamily::Fgsm, epsilon)
    }

    pub fn pgd(epsilon: f64) -> Self {
        Self::new(AttackFamily::Pgd, epsilon)
    }

    pub fn mim(epsilon: f64) -> Self {
        Self::new(AttackFamily::Mim, epsilon)
    }

    pub fn deepfool() -> Self {
        Self::new(AttackFamily::Deepfool, 0.0)
    }

    pub fn cw() -> Self {
        Self::new(AttackFamily::Cw, 0.0)
    }

    pub fn whitebox(epsilon: f64) -> Self {
        Self::new(AttackFamily::Whitebox, epsilon)
    }

    /// Short tag such as `pgd-8` or `deepfool`.
    pub fn tag(&self) -> String {
        match self.family.norm() {
            Norm::L2 => self.family.as_str().to_string(),
            Norm::Linf => format!("{}-{}", self.family.as_str(), self.epsilon),
        }
    }

    /// Inverse of [`tag`](Self::tag): `fgsm-4`, `pgd-8`, `deepfool`, `cw`, ...
    pub fn from_tag(tag: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown attack tag `{tag}`"));
        let (name, eps) = match tag.rsplit_once('-') {
            Some((name, eps)) => (name, Some(eps.parse::<f64>().map_err(|_| bad())?)),
            None => (tag, None),
        };
        let family = AttackFamily::parse(name).ok_or_else(bad)?;
        let spec = match (family.norm(), eps) {
            (Norm::Linf, Some(eps)) => Self::new(family, eps),
            (Norm::L2, None) => Self::new(family, 0.0),
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon <= PIXEL_SCALE) {
            return Err(Error::Config(format!("epsilon {} outside [0, 255]", self.epsilon)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("attack needs at least one iteration".into()));
        }
        Ok(())
    }

    fn step_normalized(&self) -> f64 {
        self.step.unwrap_or(self.epsilon / self.iterations as f64) / PIXEL_SCALE
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialRecord {
    pub id: String,
    pub attack: String,
    pub original: FlatImage,
    pub perturbed: FlatImage,
    pub true_label: usize,
    pub original_label: usize,
    pub perturbed_label: usize,
    pub success: bool,
    /// Achieved L-infinity distance in pixel units.
    pub linf: u8,
    /// Achieved L2 distance in pixel units.
    pub l2: f64,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clip_ball(x: &mut [f64], x0: &[f64], eps: f64) {
    for (v, &o) in x.iter_mut().zip(x0) {
        *v = v.clamp(o - eps, o + eps).clamp(0.0, 1.0);
    }
}

/// One signed-gradient step of size `eps`, clipped to `[0, 1]`.
pub fn fgsm_step(x: &[f64], grad: &[f64], eps: f64) -> Vec<f64> {
    x.iter().zip(grad).map(|(&v, &g)| (v + eps * sign(g)).clamp(0.0, 1.0)).collect()
}

/// Iterated signed-gradient ascent inside the L-infinity ball around `x0`,
/// starting at `x0`. With `momentum = Some(mu)` the sign is taken of
/// `g <- mu * g + grad / ||grad||_1`. Returns every iterate.
pub fn linf_ascent(
    x0: &[f64],
    eps: f64,
    alpha: f64,
    steps: usize,
    momentum: Option<f64>,
    mut grad: impl FnMut(&[f64]) -> Vec<f64>,
) -> Vec<Vec<f64>> {
    let mut x = x0.to_vec();
    let mut g = vec![0.0; x0.len()];
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let d = grad(&x);
        let dir: &[f64] = match momentum {
            None => &d,
            Some(mu) => {
                let l1: f64 = d.iter().map(|v| v.abs()).sum::<f64>().max(1e-12);
                for (gi, di) in g.iter_mut().zip(&d) {
                    *gi = mu * *gi + di / l1;
                }
                &g
            }
        };
        for (v, &di) in x.iter_mut().zip(dir) {
            *v += alpha * sign(di);
        }
        clip_ball(&mut x, x0, eps);
        out.push(x.clone());
    }
    out
}

/// Accumulated momentum after each step of [`linf_ascent`] for a given
/// gradient sequence (test and inspection helper).
pub fn momentum_history(grads: &[Vec<f64>], mu: f64) -> Vec<Vec<f64>> {
    let mut g = vec![0.0; grads.first().map_or(0, |v| v.len())];
    grads
        .iter()
        .map(|d| {
            let l1: f64 = d.iter().map(|v| v.abs()).sum::<f64>().max(1e-12);
            for (gi, di) in g.iter_mut().zip(d) {
                *gi = mu * *gi + di / l1;
            }
            g.clone()
        })
        .collect()
}

pub fn pgd_trajectory(victim: &dyn Victim, x0: &[f64], label: usize, spec: &AttackSpec) -> Vec<Vec<f64>> {
    let eps = spec.epsilon / PIXEL_SCALE;
    linf_ascent(x0, eps, spec.step_normalized(), spec.iterations, None, |x| victim.loss_and_gradient(x, label).1)
}

pub fn mim_trajectory(victim: &dyn Victim, x0: &[f64], label: usize, spec: &AttackSpec) -> Vec<Vec<f64>> {
    let eps = spec.epsilon / PIXEL_SCALE;
    linf_ascent(x0, eps, spec.step_normalized(), spec.iterations, Some(spec.momentum_decay), |x| {
        victim.loss_and_gradient(x, label).1
    })
}

/// Minimal linearized step from `x` towards the closest class boundary of
/// the current prediction: `r = |f_l| / ||w_l||^2 * w_l` with
/// `f_k = Z_k - Z_pred`, `w_k = grad f_k` and `l = argmin_k |f_k| / ||w_k||`.
pub fn deepfool_step(victim: &dyn Victim, x: &[f64]) -> Vec<f64> {
    let logits = victim.logits(x);
    let pred = argmax(&logits);
    let classes = logits.len();
    let grad_of = |k: usize| {
        victim
            .logits_vjp(x, &mut |_| {
                let mut d = vec![0.0; classes];
                d[k] = 1.0;
                d
            })
            .1
    };
    let g_pred = grad_of(pred);
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for k in (0..classes).filter(|&k| k != pred) {
        let w: Vec<f64> = grad_of(k).iter().zip(&g_pred).map(|(a, b)| a - b).collect();
        let f = logits[k] - logits[pred];
        let wn2: f64 = w.iter().map(|v| v * v).sum();
        if wn2 == 0.0 {
            continue;
        }
        let dist = f.abs() / wn2.sqrt();
        if best.as_ref().map_or(true, |(d, _, _)| dist < *d) {
            best = Some((dist, f.abs() / wn2, w));
        }
    }
    match best {
        Some((_, scale, w)) => w.iter().map(|v| v * scale).collect(),
        None => vec![0.0; x.len()],
    }
}

/// Iterates [`deepfool_step`] until the label of `x0 + (1 + overshoot) r_total`
/// changes. Returns the final point and whether the label flipped.
pub fn deepfool_continuous(victim: &dyn Victim, x0: &[f64], overshoot: f64, max_iterations: usize) -> (Vec<f64>, bool) {
    let original = victim.predict(x0);
    let mut total = vec![0.0; x0.len()];
    let mut x = x0.to_vec();
    for _ in 0..max_iterations {
        let r = deepfool_step(victim, &x);
        // a tiny push past the boundary so the step leaves the hyperplane
        for (t, ri) in total.iter_mut().zip(&r) {
            *t += ri * (1.0 + 1e-4);
        }
        x = x0
            .iter()
            .zip(&total)
            .map(|(&o, &t)| (o + (1.0 + overshoot) * t).clamp(0.0, 1.0))
            .collect();
        if victim.predict(&x) != original {
            return (x, true);
        }
    }
    (x, false)
}

/// `max(max_{i != t} Z_i - Z_t, -k)`.
pub fn cw_objective(logits: &[f64], target: usize, confidence: f64) -> f64 {
    let other = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target)
        .map(|(_, &z)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    (other - logits[target]).max(-confidence)
}

/// Most probable class other than `label`.
pub fn cw_target(logits: &[f64], label: usize) -> usize {
    let mut masked = logits.to_vec();
    masked[label] = f64::NEG_INFINITY;
    argmax(&masked)
}

/// Carlini-Wagner L2 in tanh space: minimizes `||x' - x||^2 + c f(x')` with a
/// binary search over `c`. `accept` vets candidates (e.g. after rounding).
/// Returns the smallest accepted perturbation, if any.
pub fn cw_continuous(
    victim: &dyn Victim,
    x0: &[f64],
    target: usize,
    spec: &AttackSpec,
    mut accept: impl FnMut(&[f64]) -> bool,
) -> Option<Vec<f64>> {
    let n = x0.len();
    let w0: Vec<f64> = x0.iter().map(|&v| ((2.0 * v - 1.0) * 0.999_999).atanh()).collect();
    let (mut lower, mut upper, mut c) = (0.0, f64::INFINITY, spec.cw_initial_c);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..spec.cw_search_steps {
        let mut w = w0.clone();
        let mut adam = Adam::new(n, spec.cw_learning_rate);
        let mut found = false;
        for _ in 0..spec.cw_iterations {
            let xp: Vec<f64> = w.iter().map(|v| (v.tanh() + 1.0) / 2.0).collect();
            let (logits, gz) = victim.logits_vjp(&xp, &mut |z| {
                let mut d = vec![0.0; z.len()];
                if cw_objective(z, target, spec.confidence) > -spec.confidence {
                    d[cw_target(z, target)] = c;
                    d[target] = -c;
                }
                d
            });
            let mut margin = logits.clone();
            margin[target] -= spec.confidence;
            if argmax(&margin) == target {
                let dist: f64 = xp.iter().zip(x0).map(|(a, b)| (a - b) * (a - b)).sum();
                if best.as_ref().map_or(true, |(d, _)| dist < *d) && accept(&xp) {
                    best = Some((dist, xp.clone()));
                    found = true;
                }
            }
            let grad: Vec<f64> = (0..n)
                .map(|i| {
                    let t = w[i].tanh();
                    (2.0 * (xp[i] - x0[i]) + gz[i]) * (1.0 - t * t) / 2.0
                })
                .collect();
            adam.step(&mut w, &grad);
        }
        if found {
            upper = f64::min(upper, c);
            c = (lower + upper) / 2.0;
        } else {
            lower = f64::max(lower, c);
            c = if upper.is_finite() { (lower + upper) / 2.0 } else { c * 10.0 };
        }
    }
    best.map(|(_, x)| x)
}

/// Per-class benign 5th-percentile log-likelihoods used by the white-box
/// rejection indicators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectThresholds {
    pub pixel: Vec<f64>,
    pub latent: Vec<f64>,
}

pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn reject_thresholds(
    classifier: &ClassifierModel,
    generator: &GenerativeModel,
    gmm: &GmmModel,
    benign: &[LabeledSample],
    q: f64,
) -> Result<RejectThresholds> {
    let classes = classifier.classes();
    let mut pixel = vec![Vec::new(); classes];
    let mut latent = vec![Vec::new(); classes];
    for s in benign {
        pixel[s.label].push(generator.conditional_log_likelihood(&s.image, s.label)?);
        let h = classifier.forward(&s.image)?.representation;
        latent[s.label].push(gmm.log_density(s.label, &h)?);
    }
    for (class, v) in pixel.iter().enumerate() {
        if v.is_empty() {
            return Err(Error::TooFewSamples { class, have: 0, need: 1 });
        }
    }
    Ok(RejectThresholds {
        pixel: pixel.iter().map(|v| percentile(v, q)).collect(),
        latent: latent.iter().map(|v| percentile(v, q)).collect(),
    })
}

/// Value of the white-box objective given its precomputed parts.
/// `pixel_ll[k]` and `latent_ll[k]` are the log-likelihoods under class `k`.
pub fn whitebox_objective(
    ce: f64,
    pixel_ll: &[f64],
    latent_ll: &[f64],
    thresholds: &RejectThresholds,
    label: usize,
    alpha: f64,
    beta: f64,
) -> f64 {
    let term = |ll: &[f64], th: &[f64]| {
        let others = (0..ll.len()).filter(|&k| k != label);
        let all_reject = others.clone().all(|k| ll[k] < th[k]);
        if all_reject {
            others.map(|k| ll[k]).fold(f64::NEG_INFINITY, f64::max)
        } else {
            0.0
        }
    };
    let mut total = ce;
    if alpha != 0.0 {
        total += alpha * term(pixel_ll, &thresholds.pixel);
    }
    if beta != 0.0 {
        total += beta * term(latent_ll, &thresholds.latent);
    }
    total
}

fn best_active(ll: &[f64], th: &[f64], label: usize) -> Option<usize> {
    let others: Vec<usize> = (0..ll.len()).filter(|&k| k != label).collect();
    if others.iter().all(|&k| ll[k] < th[k]) {
        others.into_iter().max_by(|&a, &b| ll[a].total_cmp(&ll[b]))
    } else {
        None
    }
}

/// Gradient of the white-box objective at `x`. With both weights zero this is
/// exactly the cross-entropy gradient PGD uses.
pub fn whitebox_gradient(
    classifier: &ClassifierModel,
    generator: &GenerativeModel,
    gmm: &GmmModel,
    thresholds: &RejectThresholds,
    x: &[f64],
    label: usize,
    alpha: f64,
    beta: f64,
) -> Vec<f64> {
    let mut grad = if beta == 0.0 {
        classifier.loss_and_gradient(x, label).1
    } else {
        let h = classifier.forward_normalized(x).expect("input length checked").representation;
        let latent: Vec<f64> = gmm.classes.iter().map(|m| m.log_density(&h)).collect();
        let drep = best_active(&latent, &thresholds.latent, label).map(|k| {
            let (_, g) = gmm.classes[k].log_density_gradient(&h);
            g.iter().map(|v| beta * v).collect::<Vec<f64>>()
        });
        let logits = classifier.logits(x);
        let mut dlogits = softmax(&logits);
        dlogits[label] -= 1.0;
        classifier.input_vjp(x, &dlogits, drep.as_deref()).1
    };
    if alpha != 0.0 {
        let targets: Vec<f64> = x.iter().map(|v| (v * PIXEL_SCALE).round().clamp(0.0, 255.0) / PIXEL_SCALE).collect();
        let shape = classifier.arch.input;
        let image = FlatImage::from_normalized(&targets, shape).expect("shape matches");
        let pixel: Vec<f64> = (0..generator.arch.classes)
            .map(|k| generator.conditional_log_likelihood(&image, k).expect("shape matches"))
            .collect();
        if let Some(k) = best_active(&pixel, &thresholds.pixel, label) {
            let (_, g) = generator.log_likelihood_gradient(x, k);
            for (gi, v) in grad.iter_mut().zip(g) {
                *gi += alpha * v;
            }
        }
    }
    grad
}

pub fn whitebox_trajectory(
    classifier: &ClassifierModel,
    generator: &GenerativeModel,
    gmm: &GmmModel,
    thresholds: &RejectThresholds,
    x0: &[f64],
    label: usize,
    spec: &AttackSpec,
) -> Vec<Vec<f64>> {
    let eps = spec.epsilon / PIXEL_SCALE;
    linf_ascent(x0, eps, spec.step_normalized(), spec.iterations, None, |x| {
        whitebox_gradient(classifier, generator, gmm, thresholds, x, label, spec.wb_alpha, spec.wb_beta)
    })
}

/// Rounds `x` to pixels and, when `epsilon` is given, projects back onto the
/// integer ball `|p - p0| <= floor(epsilon)`, then verifies the bound.
pub fn quantize(original: &FlatImage, x: &[f64], epsilon: Option<f64>) -> Result<FlatImage> {
    let mut out = FlatImage::from_normalized(x, original.shape())?;
    if let Some(eps) = epsilon {
        let e = eps.floor() as i64;
        for (p, &o) in out.pixels_mut().iter_mut().zip(original.pixels()) {
            let v = (*p as i64).clamp(o as i64 - e, o as i64 + e).clamp(0, 255);
            *p = v as u8;
        }
        if out.linf_distance(original) as f64 > eps {
            return Err(Error::Config(format!("perturbation exceeds epsilon {eps} after rounding")));
        }
    }
    Ok(out)
}

/// True iff the original was classified correctly and the perturbed one is not.
pub fn is_successful(victim: &dyn Victim, record: &AdversarialRecord) -> bool {
    victim.predict(&record.original.normalized()) == record.true_label
        && victim.predict(&record.perturbed.normalized()) != record.true_label
}

fn record(
    victim: &dyn Victim,
    sample: &LabeledSample,
    spec: &AttackSpec,
    perturbed: FlatImage,
    original_label: usize,
) -> AdversarialRecord {
    let perturbed_label = victim.predict(&perturbed.normalized());
    AdversarialRecord {
        id: sample.id.clone(),
        attack: spec.tag(),
        linf: perturbed.linf_distance(&sample.image),
        l2: perturbed.l2_distance(&sample.image),
        success: original_label == sample.label && perturbed_label != sample.label,
        original: sample.image.clone(),
        perturbed,
        true_label: sample.label,
        original_label,
        perturbed_label,
    }
}

/// Models available to the attacks. The likelihood models are only needed by
/// the white-box family.
pub struct AttackModels<'a> {
    pub classifier: &'a ClassifierModel,
    pub generator: Option<&'a GenerativeModel>,
    pub gmm: Option<&'a GmmModel>,
    pub thresholds: Option<&'a RejectThresholds>,
}

/// Runs a victim-only attack family against one sample.
pub fn attack_victim(victim: &dyn Victim, sample: &LabeledSample, spec: &AttackSpec) -> Result<AdversarialRecord> {
    spec.validate()?;
    let x0 = sample.image.normalized();
    if x0.len() != victim.input_len() {
        return Err(Error::VectorLength(x0.len(), victim.input_len()));
    }
    let original_label = victim.predict(&x0);
    let label = sample.label;
    let eps = Some(spec.epsilon);
    let perturbed = match spec.family {
        AttackFamily::Fgsm => {
            let g = victim.loss_and_gradient(&x0, label).1;
            quantize(&sample.image, &fgsm_step(&x0, &g, spec.epsilon / PIXEL_SCALE), eps)?
        }
        AttackFamily::Pgd => quantize(&sample.image, pgd_trajectory(victim, &x0, label, spec).last().unwrap(), eps)?,
        AttackFamily::Mim => quantize(&sample.image, mim_trajectory(victim, &x0, label, spec).last().unwrap(), eps)?,
        AttackFamily::Deepfool => deepfool_quantized(victim, &sample.image, spec)?,
        AttackFamily::Cw => {
            let target = cw_target(&victim.logits(&x0), label);
            let shape = sample.image.shape();
            let found = cw_continuous(victim, &x0, target, spec, |xp| {
                FlatImage::from_normalized(xp, shape).map_or(false, |q| victim.predict(&q.normalized()) != label)
            });
            match found {
                Some(x) => quantize(&sample.image, &x, None)?,
                None => sample.image.clone(),
            }
        }
        AttackFamily::Whitebox => {
            return Err(Error::NotApplicable("the white-box attack needs the likelihood models".into()));
        }
    };
    Ok(record(victim, sample, spec, perturbed, original_label))
}

/// DeepFool followed by rounding; if rounding undoes the label flip the
/// total perturbation is scaled up in 10% steps (at most ten times).
fn deepfool_quantized(victim: &dyn Victim, image: &FlatImage, spec: &AttackSpec) -> Result<FlatImage> {
    let x0 = image.normalized();
    let original = victim.predict(&x0);
    let (x, flipped) = deepfool_continuous(victim, &x0, spec.overshoot, spec.deepfool_iterations);
    let mut out = quantize(image, &x, None)?;
    if !flipped {
        return Ok(out);
    }
    let r: Vec<f64> = x.iter().zip(&x0).map(|(a, b)| a - b).collect();
    let mut scale = 1.0;
    for _ in 0..10 {
        if victim.predict(&out.normalized()) != original {
            break;
        }
        scale *= 1.1;
        let xs: Vec<f64> = x0.iter().zip(&r).map(|(&o, &d)| (o + scale * d).clamp(0.0, 1.0)).collect();
        out = quantize(image, &xs, None)?;
    }
    Ok(out)
}

pub fn run_attack(models: &AttackModels, sample: &LabeledSample, spec: &AttackSpec) -> Result<AdversarialRecord> {
    if spec.family != AttackFamily::Whitebox {
        return attack_victim(models.classifier, sample, spec);
    }
    spec.validate()?;
    let (Some(generator), Some(gmm), Some(thresholds)) = (models.generator, models.gmm, models.thresholds) else {
        return Err(Error::NotApplicable("the white-box attack needs the likelihood models".into()));
    };
    let classifier = models.classifier;
    let x0 = sample.image.normalized();
    let original_label = classifier.predict(&x0);
    let traj = whitebox_trajectory(classifier, generator, gmm, thresholds, &x0, sample.label, spec);
    let perturbed = quantize(&sample.image, traj.last().unwrap(), Some(spec.epsilon))?;
    Ok(record(classifier, sample, spec, perturbed, original_label))
}

/// Attacks every sample; `success_rate` counts only originally correct ones.
pub fn run_attack_batch(models: &AttackModels, samples: &[LabeledSample], spec: &AttackSpec) -> Result<Vec<AdversarialRecord>> {
    samples.iter().map(|s| run_attack(models, s, spec)).collect()
}

/// Successes over attempts on correctly classified originals.
pub fn success_rate(records: &[AdversarialRecord]) -> f64 {
    let attempted = records.iter().filter(|r| r.original_label == r.true_label).count();
    if attempted == 0 {
        return 0.0;
    }
    records.iter().filter(|r| r.success).count() as f64 / attempted as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::LinearModel;
    use crate::data::Shape;

    /// Single-input model whose class-0 loss gradient is `-3`.
    fn descending() -> LinearModel {
        LinearModel::new(vec![vec![1.0], vec![-2.0]], vec![0.0, 0.0])
    }

    #[test]
    fn fgsm_closed_form() {
        let m = descending();
        let (_, g) = m.loss_and_gradient(&[0.5], 0);
        assert!(g[0] < 0.0);
        let x = fgsm_step(&[0.5], &[-3.0], 8.0 / 255.0);
        assert_eq!(x, vec![0.5 - 8.0 / 255.0]);
        assert_eq!(fgsm_step(&[0.5, 0.2], &[1.0, -1.0], 0.0), vec![0.5, 0.2]);
        assert_eq!(fgsm_step(&[0.99], &[1.0], 0.1), vec![1.0]);
    }

    #[test]
    fn pgd_one_step_equals_fgsm() {
        let m = LinearModel::new(vec![vec![1.0, -1.0, 0.5], vec![-1.0, 2.0, 0.0]], vec![0.1, 0.0]);
        let x0 = [0.3, 0.6, 0.9];
        let spec = AttackSpec { iterations: 1, ..AttackSpec::pgd(8.0) };
        let traj = pgd_trajectory(&m, &x0, 0, &spec);
        let g = m.loss_and_gradient(&x0, 0).1;
        assert_eq!(traj[0], fgsm_step(&x0, &g, 8.0 / 255.0));
    }

    #[test]
    fn linear_pgd_four_steps_reaches_fgsm_point() {
        let m = LinearModel::binary(&[0.7, -0.4, 0.2, 0.0], 0.1);
        let x0 = [0.3, 0.6, 0.5, 0.4];
        let spec = AttackSpec { iterations: 4, ..AttackSpec::pgd(8.0) };
        let traj = pgd_trajectory(&m, &x0, 0, &spec);
        let g = m.loss_and_gradient(&x0, 0).1;
        let f = fgsm_step(&x0, &g, 8.0 / 255.0);
        for (a, b) in traj.last().unwrap().iter().zip(&f) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn iterates_stay_in_ball() {
        let m = LinearModel::new(vec![vec![1.0, -1.0], vec![-1.0, 1.0], vec![0.3, 0.2]], vec![0.0, 0.1, 0.0]);
        let x0 = [0.02, 0.98];
        for spec in [AttackSpec::pgd(4.0), AttackSpec::mim(16.0)] {
            let traj = match spec.family {
                AttackFamily::Pgd => pgd_trajectory(&m, &x0, 1, &spec),
                _ => mim_trajectory(&m, &x0, 1, &spec),
            };
            assert_eq!(traj.len(), 40);
            for x in &traj {
                for (a, b) in x.iter().zip(&x0) {
                    assert!((a - b).abs() <= spec.epsilon / 255.0 + 1e-15);
                    assert!((0.0..=1.0).contains(a));
                }
            }
        }
    }

    #[test]
    fn mim_constant_direction_matches_pgd() {
        let m = LinearModel::binary(&[0.7, -0.4, 0.2], 0.1);
        let x0 = [0.3, 0.6, 0.5];
        let spec = AttackSpec::mim(8.0);
        let a = pgd_trajectory(&m, &x0, 0, &spec);
        let b = mim_trajectory(&m, &x0, 0, &spec);
        assert_eq!(a, b);
    }

    #[test]
    fn momentum_two_step_accumulation() {
        let u1 = vec![0.5, -0.5];
        let u2 = vec![-0.25, 0.75];
        let h = momentum_history(&[vec![1.0, -1.0], vec![-1.0, 3.0]], 1.0);
        assert_eq!(h[1], vec![u1[0] + u2[0], u1[1] + u2[1]]);
    }

    #[test]
    fn deepfool_linear_closed_form() {
        let m = LinearModel::binary(&[3.0, 4.0], 0.0);
        let r = deepfool_step(&m, &[1.0, 0.0]);
        assert!((r[0] + 0.36).abs() < 1e-12 && (r[1] + 0.48).abs() < 1e-12);
        let landed = [1.0 + r[0], r[1]];
        assert!((3.0 * landed[0] + 4.0 * landed[1]).abs() < 1e-12);
        let on = deepfool_step(&m, &[4.0, -3.0]);
        assert_eq!(on, vec![0.0, 0.0]);
    }

    #[test]
    fn deepfool_is_minimal_among_directions() {
        let m = LinearModel::binary(&[3.0, 4.0], -1.0);
        let x = [0.6, 0.3];
        let r = deepfool_step(&m, &x);
        let norm = (r[0] * r[0] + r[1] * r[1]).sqrt();
        for i in 0..360 {
            let th = (i as f64).to_radians();
            let d = [th.cos(), th.sin()];
            let rate = 3.0 * d[0] + 4.0 * d[1];
            if rate >= 0.0 {
                continue;
            }
            // step length along d that reaches the boundary
            let t = -(3.0 * x[0] + 4.0 * x[1] - 1.0) / rate;
            assert!(norm <= t + 1e-12);
        }
    }

    #[test]
    fn deepfool_flips_linear_model() {
        let m = LinearModel::binary(&[3.0, 4.0], -2.0);
        let x0 = [0.5, 0.5];
        let (x, flipped) = deepfool_continuous(&m, &x0, 0.02, 50);
        assert!(flipped);
        assert_ne!(m.predict(&x), m.predict(&x0));
    }

    #[test]
    fn cw_objective_fixtures() {
        assert_eq!(cw_objective(&[2.0, 5.0], 1, 0.5), -0.5);
        assert_eq!(cw_objective(&[2.0, 2.2], 1, 0.5), -0.20000000000000018);
        assert_eq!(cw_objective(&[4.0, 1.0], 1, 0.5), 3.0);
        assert_eq!(cw_target(&[3.0, 1.0, 2.0], 0), 2);
    }

    #[test]
    fn whitebox_objective_hand_sum() {
        let th = RejectThresholds { pixel: vec![-10.0, -10.0, -10.0], latent: vec![0.0, 0.0, 0.0] };
        // every other class rejects in pixel space; class 1 is the best of them
        let v = whitebox_objective(2.0, &[-1.0, -12.0, -15.0], &[5.0, 1.0, -3.0], &th, 0, 1.0, 1.0);
        assert_eq!(v, 2.0 + -12.0 + 0.0);
        let v = whitebox_objective(2.0, &[-1.0, -12.0, -15.0], &[5.0, -1.0, -3.0], &th, 0, 0.5, 2.0);
        assert_eq!(v, 2.0 + 0.5 * -12.0 + 2.0 * -1.0);
        assert_eq!(whitebox_objective(2.0, &[0.0; 3], &[0.0; 3], &th, 0, 0.0, 0.0), 2.0);
    }

    #[test]
    fn quantize_respects_integer_ball() {
        let img = FlatImage::new(vec![0, 100, 255, 10], 1, 4, 1).unwrap();
        let x = [-0.1, 110.4 / 255.0, 1.2, 17.6 / 255.0];
        let q = quantize(&img, &x, Some(8.0)).unwrap();
        assert_eq!(q.pixels(), &[0, 108, 255, 18]);
        let q = quantize(&img, &x, Some(7.5)).unwrap();
        assert_eq!(q.pixels(), &[0, 107, 255, 17]);
        let q = quantize(&img, &x, None).unwrap();
        assert_eq!(q.pixels(), &[0, 110, 255, 18]);
    }

    #[test]
    fn success_requires_correct_original() {
        let m = LinearModel::binary(&[1.0], -0.5);
        let shape = Shape::new(1, 1, 1);
        let img = |v: u8| FlatImage::new(vec![v], shape.rows, shape.cols, shape.channels).unwrap();
        let mk = |orig: u8, pert: u8, y: usize| AdversarialRecord {
            id: "a".into(),
            attack: "fgsm-8".into(),
            original: img(orig),
            perturbed: img(pert),
            true_label: y,
            original_label: 0,
            perturbed_label: 0,
            success: false,
            linf: 0,
            l2: 0.0,
        };
        // pixel 255 -> class 0, pixel 0 -> class 1
        assert!(is_successful(&m, &mk(255, 0, 0)));
        assert!(!is_successful(&m, &mk(255, 250, 0)));
        assert!(!is_successful(&m, &mk(0, 0, 0)));
    }

    #[test]
    fn cw_flips_linear_model_with_small_norm() {
        let m = LinearModel::new(vec![vec![2.0, 0.0], vec![0.0, 2.0]], vec![0.0, 0.0]);
        let x0 = [0.6, 0.4];
        let spec = AttackSpec { cw_iterations: 300, ..AttackSpec::cw() };
        let x = cw_continuous(&m, &x0, 1, &spec, |_| true).expect("attack succeeds");
        let z = m.logits(&x);
        assert!(z[1] - z[0] >= 0.5 - 1e-9);
        // closest point with x1 - x0 >= 0.25 lies 0.45 / sqrt(2) away along (-1, 1)
        let d = ((x[0] - x0[0]).powi(2) + (x[1] - x0[1]).powi(2)).sqrt();
        let min = 0.45 / 2f64.sqrt();
        assert!(d >= min - 1e-9 && d < min * 1.01, "{d}");
    }

    #[test]
    fn tags_roundtrip() {
        for tag in ["fgsm-4", "pgd-16", "mim-8", "deepfool", "cw", "whitebox-8"] {
            assert_eq!(AttackSpec::from_tag(tag).unwrap().tag(), tag);
        }
        assert_eq!(AttackSpec::from_tag("pgd-8").unwrap(), AttackSpec::pgd(8.0));
        for bad in ["pgd", "deepfool-2", "fgsm-x", "laser-4", "pgd-300"] {
            assert!(AttackSpec::from_tag(bad).is_err(), "{bad}");
        }
    }
}
