//! Detection metrics, system accuracy, mutual information, predictor
//! ablation and the report writer.
//!
//! Two score orientations appear here. `adr_at_tnr` takes benign-ness scores
//! (larger = more benign, like the detector's `P_RF + P_IF`); `auroc` and
//! `roc_curve` take anomaly scores (larger = more adversarial). Use
//! [`anomaly`] to flip the former into the latter.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::AdversarialRecord;
use crate::detector::{benign_threshold, mask_name, DetectorConfig, HybridDetector, PredictorMask, ADVERSARIAL};
use crate::error::{Error, Result};
use crate::io::write_json;
use crate::predictors::PREDICTOR_COUNT;

/// Below this detection rate an attack row is flagged as a severe failure.
pub const SEVERE_ADR: f64 = 0.5;

pub const MI_BINS: usize = 20;

pub fn anomaly(benign_scores: &[f64]) -> Vec<f64> {
    benign_scores.iter().map(|s| -s).collect()
}

fn require(name: &'static str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::EmptySplit(name));
    }
    Ok(())
}

/// Attack detection rate at the threshold that keeps fraction `tnr` of the
/// benign scores strictly above it. Scores are benign-ness.
pub fn adr_at_tnr(benign: &[f64], adversarial: &[f64], tnr: f64) -> Result<f64> {
    require("benign scores", benign)?;
    require("adversarial scores", adversarial)?;
    let t = benign_threshold(benign, tnr);
    Ok(adversarial.iter().filter(|&&s| s <= t).count() as f64 / adversarial.len() as f64)
}

/// Benign detection rate (TNR) at the same threshold.
pub fn bdr_at_tnr(benign: &[f64], tnr: f64) -> Result<f64> {
    require("benign scores", benign)?;
    let t = benign_threshold(benign, tnr);
    Ok(benign.iter().filter(|&&s| s > t).count() as f64 / benign.len() as f64)
}

/// Probability that a random adversarial anomaly score exceeds a random
/// benign one, ties counting one half.
pub fn auroc(benign: &[f64], adversarial: &[f64]) -> Result<f64> {
    require("benign scores", benign)?;
    require("adversarial scores", adversarial)?;
    let mut all: Vec<(f64, bool)> = benign
        .iter()
        .map(|&s| (s, false))
        .chain(adversarial.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // sum of midranks of the adversarial scores
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (nb, na) = (benign.len() as f64, adversarial.len() as f64);
    Ok((rank_sum - na * (na + 1.0) / 2.0) / (na * nb))
}

/// `(FPR, TPR)` points for thresholds swept from high to low over anomaly
/// scores; tied scores move diagonally so the trapezoid area equals [`auroc`].
pub fn roc_curve(benign: &[f64], adversarial: &[f64]) -> Result<Vec<(f64, f64)>> {
    require("benign scores", benign)?;
    require("adversarial scores", adversarial)?;
    let mut all: Vec<(f64, bool)> = benign
        .iter()
        .map(|&s| (s, false))
        .chain(adversarial.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (nb, na) = (benign.len() as f64, adversarial.len() as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / nb, tp as f64 / na));
        i = j;
    }
    Ok(points)
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

/// Accuracy of the bare classifier and of classifier plus detector over the
/// attacked inputs whose originals were classified correctly. A pair counts
/// for the combined system if it is flagged or still classified correctly.
pub fn overall_system_accuracy(records: &[AdversarialRecord], decisions: &[u8]) -> Result<(f64, f64)> {
    if records.len() != decisions.len() {
        return Err(Error::VectorLength(records.len(), decisions.len()));
    }
    let (correct, kept): (Vec<bool>, Vec<u8>) = records
        .iter()
        .zip(decisions.iter().copied())
        .filter(|(r, _)| r.original_label == r.true_label)
        .map(|(r, d)| (r.perturbed_label == r.true_label, d))
        .unzip();
    system_accuracy(&correct, &kept)
}

/// Same as [`overall_system_accuracy`] given, per attacked input, whether the
/// classifier is still right and the detector decision.
pub fn system_accuracy(still_correct: &[bool], decisions: &[u8]) -> Result<(f64, f64)> {
    if still_correct.len() != decisions.len() {
        return Err(Error::VectorLength(still_correct.len(), decisions.len()));
    }
    if still_correct.is_empty() {
        return Err(Error::EmptySplit("attempted attacks"));
    }
    let n = still_correct.len() as f64;
    let dnn = still_correct.iter().filter(|&&c| c).count() as f64 / n;
    let both = still_correct
        .iter()
        .zip(decisions)
        .filter(|(&c, &d)| d == ADVERSARIAL || c)
        .count() as f64
        / n;
    Ok((dnn, both))
}

/// Equal-frequency bin index for every value; tied values share a bin.
pub fn equal_frequency_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0; n];
    let mut prev: Option<(f64, usize)> = None;
    for (rank, &i) in order.iter().enumerate() {
        let bin = match prev {
            Some((v, b)) if v == values[i] => b,
            _ => rank * bins / n,
        };
        out[i] = bin;
        prev = Some((values[i], bin));
    }
    out
}

/// Plug-in mutual information in nats between a binned predictor and a
/// binary label.
pub fn mutual_information(values: &[f64], labels: &[u8], bins: usize) -> Result<f64> {
    if values.len() != labels.len() {
        return Err(Error::VectorLength(values.len(), labels.len()));
    }
    for class in [0u8, 1] {
        let have = labels.iter().filter(|&&l| l == class).count();
        if have < 2 {
            return Err(Error::TooFewSamples { class: class as usize, have, need: 2 });
        }
    }
    let n = values.len() as f64;
    let b = equal_frequency_bins(values, bins);
    let mut joint = vec![[0.0f64; 2]; bins];
    for (&bi, &l) in b.iter().zip(labels) {
        joint[bi][l as usize] += 1.0;
    }
    let py = [0, 1].map(|c| labels.iter().filter(|&&l| l == c).count() as f64 / n);
    let mut mi = 0.0;
    for row in &joint {
        let px = (row[0] + row[1]) / n;
        for c in 0..2 {
            if row[c] > 0.0 {
                let pxy = row[c] / n;
                mi += pxy * (pxy / (px * py[c])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Features of one attack set, restricted to successful attacks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackFeatures {
    pub attack: String,
    pub features: Vec<[f64; PREDICTOR_COUNT]>,
}

/// Benign and adversarial features used to train, calibrate and test.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct FeatureSets {
    pub train_benign: Vec<[f64; PREDICTOR_COUNT]>,
    pub train_adversarial: Vec<[f64; PREDICTOR_COUNT]>,
    pub train_sources: Vec<String>,
    pub calibration_benign: Vec<[f64; PREDICTOR_COUNT]>,
    pub test_benign: Vec<[f64; PREDICTOR_COUNT]>,
    pub test_attacks: Vec<AttackFeatures>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: String,
    pub attack: String,
    pub auc: f64,
}

/// Detector AUROC of `detector` on one attack set against the test benign set.
pub fn detector_auroc(detector: &HybridDetector, benign: &[[f64; PREDICTOR_COUNT]], adversarial: &[[f64; PREDICTOR_COUNT]]) -> Result<f64> {
    let b: Vec<f64> = benign.iter().map(|d| -detector.score(d)).collect();
    let a: Vec<f64> = adversarial.iter().map(|d| -detector.score(d)).collect();
    auroc(&b, &a)
}

/// Retrains the hybrid detector on each predictor subset and reports
/// per-attack AUROC.
pub fn ablation_run(sets: &FeatureSets, masks: &[PredictorMask], config: &DetectorConfig) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for mask in masks {
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyMask);
        }
        let cfg = DetectorConfig { mask: *mask, ..config.clone() };
        let det = HybridDetector::train(&sets.train_benign, &sets.train_adversarial, &sets.train_sources, &cfg)?;
        for attack in &sets.test_attacks {
            if attack.features.is_empty() {
                continue;
            }
            rows.push(AblationRow {
                mask: mask_name(mask),
                attack: attack.attack.clone(),
                auc: detector_auroc(&det, &sets.test_benign, &attack.features)?,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapAuc {
    pub auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub misclassified: usize,
    pub correct: usize,
}

/// AUROC with a percentile bootstrap interval (`level`, e.g. 0.95), resampling
/// each group with replacement.
pub fn bootstrap_auroc(benign: &[f64], adversarial: &[f64], resamples: usize, level: f64, seed: u64) -> Result<BootstrapAuc> {
    let auc = auroc(benign, adversarial)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws: Vec<f64> = (0..resamples)
        .map(|_| {
            let b: Vec<f64> = (0..benign.len()).map(|_| benign[rng.gen_range(0..benign.len())]).collect();
            let a: Vec<f64> = (0..adversarial.len()).map(|_| adversarial[rng.gen_range(0..adversarial.len())]).collect();
            auroc(&b, &a).expect("non-empty resample")
        })
        .collect();
    draws.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| draws[((q * resamples as f64) as usize).min(resamples - 1)];
    Ok(BootstrapAuc {
        auc,
        ci_low: at(tail),
        ci_high: at(1.0 - tail),
        misclassified: adversarial.len(),
        correct: benign.len(),
    })
}

/// Detector AUROC separating naturally misclassified benign inputs from
/// correctly classified ones.
pub fn misclassified_benign_eval(
    detector: &HybridDetector,
    correct: &[[f64; PREDICTOR_COUNT]],
    misclassified: &[[f64; PREDICTOR_COUNT]],
    resamples: usize,
    seed: u64,
) -> Result<BootstrapAuc> {
    if misclassified.is_empty() {
        return Err(Error::NotApplicable("no misclassified benign samples".into()));
    }
    let b: Vec<f64> = correct.iter().map(|d| -detector.score(d)).collect();
    let a: Vec<f64> = misclassified.iter().map(|d| -detector.score(d)).collect();
    bootstrap_auroc(&b, &a, resamples, 0.95, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub attack: String,
    pub success_rate: f64,
    pub adr: f64,
    pub bdr: f64,
    pub auroc: f64,
    pub severe: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub attack: String,
    pub dnn: f64,
    pub dnn_plus_detector: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiRow {
    pub attack: String,
    pub mi: [f64; PREDICTOR_COUNT],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seeds: Vec<(String, u64)>,
    pub model_hashes: Vec<(String, String)>,
    pub tau: f64,
    pub tnr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<AttackRow>,
    pub roc: Vec<(String, Vec<(f64, f64)>)>,
    pub accuracy: Vec<AccuracyRow>,
    pub mi: Vec<MiRow>,
    pub ablation: Vec<AblationRow>,
    pub misclassified: Option<BootstrapAuc>,
    pub manifest: RunManifest,
}

/// Per-attack detection row from benign-ness scores.
pub fn attack_row(attack: &str, success_rate: f64, benign: &[f64], adversarial: &[f64], tnr: f64) -> Result<AttackRow> {
    let adr = adr_at_tnr(benign, adversarial, tnr)?;
    Ok(AttackRow {
        attack: attack.to_string(),
        success_rate,
        adr,
        bdr: bdr_at_tnr(benign, tnr)?,
        auroc: auroc(&anomaly(benign), &anomaly(adversarial))?,
        severe: adr < SEVERE_ADR,
    })
}

/// MI of each predictor with the benign(0)/adversarial(1) label.
pub fn predictor_mi(benign: &[[f64; PREDICTOR_COUNT]], adversarial: &[[f64; PREDICTOR_COUNT]], bins: usize) -> Result<[f64; PREDICTOR_COUNT]> {
    let labels: Vec<u8> = std::iter::repeat(0).take(benign.len()).chain(std::iter::repeat(1).take(adversarial.len())).collect();
    let mut out = [0.0; PREDICTOR_COUNT];
    for (j, o) in out.iter_mut().enumerate() {
        let values: Vec<f64> = benign.iter().chain(adversarial).map(|d| d[j]).collect();
        *o = mutual_information(&values, &labels, bins)?;
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn file_safe(tag: &str) -> String {
    tag.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Writes `report.json`, tab-separated tables, one ROC point file per attack
/// and a rendered `roc.png` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    let mut s = String::from("attack\tsuccess_rate\tadr\tbdr\tauroc\tsevere\n");
    for r in &report.rows {
        let _ = writeln!(s, "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}", r.attack, r.success_rate, r.adr, r.bdr, r.auroc, r.severe);
    }
    write_text(&dir.join("detection.tsv"), &s)?;
    let mut s = String::from("attack\tdnn\tdnn_plus_detector\n");
    for r in &report.accuracy {
        let _ = writeln!(s, "{}\t{:.4}\t{:.4}", r.attack, r.dnn, r.dnn_plus_detector);
    }
    write_text(&dir.join("accuracy.tsv"), &s)?;
    let mut s = String::from("attack\td1\td2\td3\td4\n");
    for r in &report.mi {
        let _ = writeln!(s, "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}", r.attack, r.mi[0], r.mi[1], r.mi[2], r.mi[3]);
    }
    write_text(&dir.join("mi.tsv"), &s)?;
    let mut s = String::from("mask\tattack\tauc\n");
    for r in &report.ablation {
        let _ = writeln!(s, "{}\t{}\t{:.4}", r.mask, r.attack, r.auc);
    }
    write_text(&dir.join("ablation.tsv"), &s)?;
    for (tag, pts) in &report.roc {
        let mut s = String::from("fpr\ttpr\n");
        for (f, t) in pts {
            let _ = writeln!(s, "{f:.6}\t{t:.6}");
        }
        write_text(&dir.join(format!("roc_{}.tsv", file_safe(tag))), &s)?;
    }
    render_roc_png(&report.roc, &dir.join("roc.png"))
}

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];

fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: Rgb<u8>) {
    let (mut x, mut y) = a;
    let dx = (b.0 - x).abs();
    let dy = -(b.1 - y).abs();
    let sx = if x < b.0 { 1 } else { -1 };
    let sy = if y < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Plots ROC polylines on a unit square with the chance diagonal. Curve
/// colours follow the order of `curves`.
pub fn render_roc_png(curves: &[(String, Vec<(f64, f64)>)], path: &Path) -> Result<()> {
    const SIZE: u32 = 400;
    const MARGIN: i64 = 30;
    let span = SIZE as i64 - 2 * MARGIN;
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let to_px = |(f, t): (f64, f64)| (MARGIN + (f * span as f64).round() as i64, MARGIN + span - (t * span as f64).round() as i64);
    let black = Rgb([0, 0, 0]);
    draw_line(&mut img, to_px((0.0, 0.0)), to_px((1.0, 0.0)), black);
    draw_line(&mut img, to_px((0.0, 0.0)), to_px((0.0, 1.0)), black);
    draw_line(&mut img, to_px((1.0, 0.0)), to_px((1.0, 1.0)), black);
    draw_line(&mut img, to_px((0.0, 1.0)), to_px((1.0, 1.0)), black);
    draw_line(&mut img, to_px((0.0, 0.0)), to_px((1.0, 1.0)), Rgb([180, 180, 180]));
    for (i, (_, pts)) in curves.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        for w in pts.windows(2) {
            draw_line(&mut img, to_px(w[0]), to_px(w[1]), color);
        }
        // legend swatch
        let y = MARGIN + span - 12 - 10 * i as i64;
        draw_line(&mut img, (MARGIN + span - 40, y), (MARGIN + span - 10, y), color);
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path)?;
    Ok(())
}
