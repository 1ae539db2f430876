//! End-to-end desk experiment: data, victim and likelihood models, attacks,
//! feature extraction, detector training and the evaluation report.
//!
//! Every expensive stage is cached as JSON under a work directory next to a
//! key file holding the configuration it was built from, so re-running with
//! an unchanged configuration only repeats the cheap stages.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{reject_thresholds, run_attack, AdversarialRecord, AttackFamily, AttackModels, AttackSpec, RejectThresholds};
use crate::classifier::{train_classifier, ClassifierConfig, ClassifierModel, TrainingMeta};
use crate::data::{load_dataset, load_png, save_png, DatasetConfig, DatasetSplit, LabeledSample};
use crate::detector::{mask_name, DetectorConfig, HybridDetector, PredictorMask};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_run, anomaly, attack_row, misclassified_benign_eval, predictor_mi, roc_curve, system_accuracy, AccuracyRow,
    AttackFeatures, EvalReport, FeatureSets, MiRow, RunManifest, MI_BINS,
};
use crate::features::{FeatureRecord, FeatureSplit, FeatureStore, BENIGN};
use crate::generator::{train_generator, GenerativeModel, GeneratorConfig, GeneratorMeta};
use crate::io::{read_json, write_json};
use crate::predictors::{extract_features, fit_gmm, representations_by_class, GmmConfig, GmmModel, PREDICTOR_COUNT};
use crate::synth::{synthesize, SynthConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic(SynthConfig),
    Directory(DatasetConfig),
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synthetic(SynthConfig::default())
    }
}

pub fn load_data(source: &DataSource) -> Result<DatasetSplit> {
    match source {
        DataSource::Synthetic(c) => synthesize(c),
        DataSource::Directory(c) => load_dataset(c),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSource,
    pub classifier: ClassifierConfig,
    pub generator: GeneratorConfig,
    pub gmm: GmmConfig,
    /// Benign percentile below which a class "rejects" a candidate in the
    /// white-box objective.
    pub reject_quantile: f64,
    /// Training images per class used to set the reject thresholds.
    pub reject_per_class: usize,
    /// Iterations of PGD, MIM and the white-box attack.
    pub iterations: usize,
    pub cw_search_steps: usize,
    pub cw_iterations: usize,
    /// Attacks whose features train the detector, run on the detector half of
    /// the validation split.
    pub train_attacks: Vec<String>,
    /// Attacks evaluated on the test split.
    pub test_attacks: Vec<String>,
    pub train_attack_images: usize,
    pub test_attack_images: usize,
    pub detector: DetectorConfig,
    pub ablation_masks: Vec<PredictorMask>,
    pub bootstrap_resamples: usize,
    pub mi_bins: usize,
}

fn all_masks() -> Vec<PredictorMask> {
    (1u8..16).map(|bits| std::array::from_fn(|j| bits & (1 << j) != 0)).collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSource::default(),
            classifier: ClassifierConfig::default(),
            generator: GeneratorConfig {
                epochs: 4,
                ..GeneratorConfig::default()
            },
            gmm: GmmConfig::default(),
            reject_quantile: 0.05,
            reject_per_class: 50,
            iterations: 40,
            cw_search_steps: 5,
            cw_iterations: 100,
            train_attacks: vec!["deepfool".into(), "pgd-4".into()],
            test_attacks: [
                "fgsm-4", "fgsm-8", "fgsm-16", "pgd-4", "pgd-8", "pgd-16", "mim-8", "deepfool", "cw", "whitebox-8",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            train_attack_images: 150,
            test_attack_images: 100,
            detector: DetectorConfig::default(),
            ablation_masks: all_masks(),
            bootstrap_resamples: 1000,
            mi_bins: MI_BINS,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: Self = toml::from_str(&text)?;
        if let DataSource::Directory(d) = &mut config.data {
            if d.path.is_relative() {
                if let Some(parent) = path.parent() {
                    d.path = parent.join(&d.path);
                }
            }
        }
        Ok(config)
    }

    /// Replaces every stage seed with one derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        match &mut self.data {
            DataSource::Synthetic(c) => c.seed = seed,
            DataSource::Directory(c) => c.seed = seed,
        }
        self.classifier.seed = derive_seed(seed, "classifier");
        self.generator.seed = derive_seed(seed, "generator");
        self.gmm.seed = derive_seed(seed, "gmm");
        self.detector.forest.seed = derive_seed(seed, "forest");
        self.detector.isolation.seed = derive_seed(seed, "isolation");
        self
    }

    pub fn attack_spec(&self, tag: &str) -> Result<AttackSpec> {
        let mut spec = AttackSpec::from_tag(tag)?;
        if matches!(spec.family, AttackFamily::Pgd | AttackFamily::Mim | AttackFamily::Whitebox) {
            spec.iterations = self.iterations;
        }
        spec.cw_search_steps = self.cw_search_steps;
        spec.cw_iterations = self.cw_iterations;
        spec.seed = derive_seed(self.seed, tag);
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for tag in self.train_attacks.iter().chain(&self.test_attacks) {
            self.attack_spec(tag)?;
        }
        if self.train_attacks.is_empty() {
            return Err(Error::Config("at least one training attack is required".into()));
        }
        if self.ablation_masks.iter().any(|m| !m.iter().any(|&b| b)) {
            return Err(Error::EmptyMask);
        }
        if !(0.0..=1.0).contains(&self.detector.tnr) {
            return Err(Error::Config(format!("tnr {} outside [0, 1]", self.detector.tnr)));
        }
        Ok(())
    }
}

/// Stable 64-bit seed for the named sub-stream of `base`.
pub fn derive_seed(base: u64, name: &str) -> u64 {
    let digest = Sha256::new().chain_update(base.to_le_bytes()).chain_update(name.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Directory holding cached stage artifacts.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub dir: PathBuf,
}

impl Workspace {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Loads `<name>.json` if `<name>.key.json` matches `key`, otherwise
    /// builds, stores and returns the artifact.
    pub fn cached<T, K, F>(&self, name: &str, key: &K, build: F) -> Result<T>
    where
        T: Serialize + DeserializeOwned,
        K: Serialize,
        F: FnOnce() -> Result<T>,
    {
        let key = serde_json::to_value(key)?;
        let artifact = self.path(&format!("{name}.json"));
        let key_path = self.path(&format!("{name}.key.json"));
        if artifact.exists() && read_json::<serde_json::Value>(&key_path).ok().as_ref() == Some(&key) {
            if let Ok(value) = read_json(&artifact) {
                info!("reusing {}", artifact.display());
                return Ok(value);
            }
        }
        info!("building {name}");
        let value = build()?;
        write_json(&artifact, &value)?;
        write_json(&key_path, &key)?;
        Ok(value)
    }
}

/// Trained models shared by the attack and feature stages.
pub struct Models {
    pub classifier: ClassifierModel,
    pub generator: GenerativeModel,
    pub gmm: GmmModel,
    pub thresholds: RejectThresholds,
}

impl Models {
    pub fn attack_models(&self) -> AttackModels<'_> {
        AttackModels {
            classifier: &self.classifier,
            generator: Some(&self.generator),
            gmm: Some(&self.gmm),
            thresholds: Some(&self.thresholds),
        }
    }
}

pub fn fit_gmm_on(classifier: &ClassifierModel, train: &[LabeledSample], config: &GmmConfig) -> Result<GmmModel> {
    fit_gmm(&representations_by_class(classifier, train)?, config)
}

/// The first `per_class` samples of each class in `samples`.
pub fn per_class_prefix(samples: &[LabeledSample], classes: usize, per_class: usize) -> Vec<LabeledSample> {
    let mut taken = vec![0; classes];
    samples
        .iter()
        .filter(|s| {
            let keep = taken[s.label] < per_class;
            taken[s.label] += 1;
            keep
        })
        .cloned()
        .collect()
}

pub fn train_models(ws: &Workspace, config: &ExperimentConfig, data: &DatasetSplit) -> Result<Models> {
    let classifier: ClassifierModel = ws.cached("classifier", &(&config.data, &config.classifier), || {
        let m = train_classifier(data, &config.classifier)?;
        info!("classifier test accuracy {:.4}", m.meta.test_accuracy);
        Ok(m)
    })?;
    let generator: GenerativeModel = ws.cached("generator", &(&config.data, &config.generator), || {
        let m = train_generator(data, &config.generator)?;
        info!("generator test bits/dim {:.4}", m.meta.test_bits_per_dim);
        Ok(m)
    })?;
    let gmm_key = (&config.data, &config.classifier, &config.gmm);
    let gmm: GmmModel = ws.cached("gmm", &gmm_key, || fit_gmm_on(&classifier, &data.train, &config.gmm))?;
    let thresholds_key = (&gmm_key, &config.generator, config.reject_quantile, config.reject_per_class);
    let thresholds: RejectThresholds = ws.cached("reject", &thresholds_key, || {
        let subset = per_class_prefix(&data.train, data.class_count, config.reject_per_class);
        reject_thresholds(&classifier, &generator, &gmm, &subset, config.reject_quantile)
    })?;
    Ok(Models {
        classifier,
        generator,
        gmm,
        thresholds,
    })
}

/// Splits the validation samples into a detector-training half and a
/// calibration half.
pub fn detector_halves(val: &[LabeledSample], seed: u64) -> (Vec<LabeledSample>, Vec<LabeledSample>) {
    let mut shuffled = val.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "halves")));
    let calibration = shuffled.split_off(shuffled.len() / 2);
    (shuffled, calibration)
}

/// Up to `n` samples the classifier gets right, in a seeded random order.
pub fn correctly_classified(classifier: &ClassifierModel, samples: &[LabeledSample], n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    let mut order: Vec<&LabeledSample> = samples.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::new();
    for s in order {
        if out.len() == n {
            break;
        }
        if classifier.predict_image(&s.image)? == s.label {
            out.push(s.clone());
        }
    }
    Ok(out)
}

pub fn attack_all(models: &AttackModels, samples: &[LabeledSample], spec: &AttackSpec) -> Result<Vec<AdversarialRecord>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let r = run_attack(models, s, spec)?;
            log::debug!("{} {}/{} success={}", spec.tag(), i + 1, samples.len(), r.success);
            Ok(r)
        })
        .collect()
}

pub fn benign_features(models: &Models, samples: &[LabeledSample], split: FeatureSplit, seed: u64) -> Result<Vec<FeatureRecord>> {
    samples
        .iter()
        .map(|s| {
            let view_seed = derive_seed(seed, &format!("views/{}", s.id));
            let (fv, _) = extract_features(&models.classifier, &models.generator, &models.gmm, &s.image, &s.id, view_seed)?;
            Ok(FeatureRecord::new(&fv, split, BENIGN, s.label, false, view_seed))
        })
        .collect()
}

pub fn adversarial_features(models: &Models, records: &[AdversarialRecord], split: FeatureSplit, seed: u64) -> Result<Vec<FeatureRecord>> {
    records
        .iter()
        .map(|r| {
            let view_seed = derive_seed(seed, &format!("views/{}/{}", r.attack, r.id));
            let (fv, _) = extract_features(&models.classifier, &models.generator, &models.gmm, &r.perturbed, &r.id, view_seed)?;
            Ok(FeatureRecord::new(&fv, split, &r.attack, r.true_label, r.success, view_seed))
        })
        .collect()
}

/// Trains the hybrid detector on the store's training rows and calibrates it
/// on the calibration rows.
pub fn train_detector_from_store(store: &FeatureStore, train_attacks: &[String], config: &DetectorConfig) -> Result<HybridDetector> {
    let benign = store.benign(FeatureSplit::Train);
    let adversarial: Vec<[f64; PREDICTOR_COUNT]> = train_attacks
        .iter()
        .flat_map(|t| store.adversarial(FeatureSplit::Train, t))
        .collect();
    let mut detector = HybridDetector::train(&benign, &adversarial, train_attacks, config)?;
    detector.calibrate(&store.benign(FeatureSplit::Calibration), config.tnr)?;
    Ok(detector)
}

/// Everything the report needs besides the feature store and the detector.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSettings {
    pub train_attacks: Vec<String>,
    pub detector: DetectorConfig,
    pub ablation_masks: Vec<PredictorMask>,
    pub bootstrap_resamples: usize,
    pub mi_bins: usize,
    pub seed: u64,
}

impl From<&ExperimentConfig> for EvalSettings {
    fn from(c: &ExperimentConfig) -> Self {
        Self {
            train_attacks: c.train_attacks.clone(),
            detector: c.detector.clone(),
            ablation_masks: c.ablation_masks.clone(),
            bootstrap_resamples: c.bootstrap_resamples,
            mi_bins: c.mi_bins,
            seed: c.seed,
        }
    }
}

fn scores(detector: &HybridDetector, features: &[[f64; PREDICTOR_COUNT]]) -> Vec<f64> {
    features.iter().map(|d| detector.score(d)).collect()
}

/// Test-split feature sets: correctly and wrongly classified benign rows and
/// successful attacks per tag.
pub fn feature_sets(store: &FeatureStore, train_attacks: &[String]) -> (FeatureSets, Vec<[f64; PREDICTOR_COUNT]>) {
    let (correct, wrong): (Vec<&FeatureRecord>, Vec<&FeatureRecord>) =
        store.rows(FeatureSplit::Test, BENIGN).partition(|r| r.correctly_classified());
    let sets = FeatureSets {
        train_benign: store.benign(FeatureSplit::Train),
        train_adversarial: train_attacks
            .iter()
            .flat_map(|t| store.adversarial(FeatureSplit::Train, t))
            .collect(),
        train_sources: train_attacks.to_vec(),
        calibration_benign: store.benign(FeatureSplit::Calibration),
        test_benign: correct.iter().map(|r| r.d()).collect(),
        test_attacks: store
            .attacks(FeatureSplit::Test)
            .into_iter()
            .map(|attack| AttackFeatures {
                features: store.adversarial(FeatureSplit::Test, &attack),
                attack,
            })
            .collect(),
    };
    (sets, wrong.iter().map(|r| r.d()).collect())
}

/// Builds the full report from a feature store; a pure function of its inputs.
pub fn evaluate_store(store: &FeatureStore, detector: &HybridDetector, settings: &EvalSettings, manifest: RunManifest) -> Result<EvalReport> {
    let tnr = settings.detector.tnr;
    let (sets, misclassified) = feature_sets(store, &settings.train_attacks);
    if sets.test_benign.is_empty() {
        return Err(Error::EmptySplit("test benign features"));
    }
    let benign_scores = scores(detector, &sets.test_benign);
    let mut report = EvalReport {
        manifest,
        ..EvalReport::default()
    };
    for attack in store.attacks(FeatureSplit::Test) {
        let attempted: Vec<&FeatureRecord> = store.rows(FeatureSplit::Test, &attack).collect();
        let successes = attempted.iter().filter(|r| r.success).count();
        let success_rate = successes as f64 / attempted.len() as f64;
        let decisions = attempted.iter().map(|r| detector.decide(&r.d())).collect::<Result<Vec<u8>>>()?;
        let still_correct: Vec<bool> = attempted.iter().map(|r| r.correctly_classified()).collect();
        let (dnn, dnn_plus_detector) = system_accuracy(&still_correct, &decisions)?;
        report.accuracy.push(AccuracyRow {
            attack: attack.clone(),
            dnn,
            dnn_plus_detector,
        });
        let adversarial = store.adversarial(FeatureSplit::Test, &attack);
        if adversarial.is_empty() {
            log::warn!("{attack}: no successful attacks, detection metrics skipped");
            continue;
        }
        let adv_scores = scores(detector, &adversarial);
        report.rows.push(attack_row(&attack, success_rate, &benign_scores, &adv_scores, tnr)?);
        report.roc.push((attack.clone(), roc_curve(&anomaly(&benign_scores), &anomaly(&adv_scores))?));
        report.mi.push(MiRow {
            attack: attack.clone(),
            mi: predictor_mi(&sets.test_benign, &adversarial, settings.mi_bins)?,
        });
    }
    report.ablation = ablation_run(&sets, &settings.ablation_masks, &settings.detector)?;
    report.misclassified = match misclassified_benign_eval(
        detector,
        &sets.test_benign,
        &misclassified,
        settings.bootstrap_resamples,
        derive_seed(settings.seed, "bootstrap"),
    ) {
        Ok(b) => Some(b),
        Err(Error::NotApplicable(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(report)
}

/// Columns of an adversarial archive's `manifest.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArchiveRow {
    id: String,
    attack: String,
    true_label: usize,
    original_label: usize,
    perturbed_label: usize,
    success: bool,
    linf: u8,
    l2: f64,
}

fn png_name(id: &str) -> String {
    let safe: String = id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("{safe}.png")
}

/// Writes `original/<id>.png`, `perturbed/<id>.png` and `manifest.csv`.
pub fn write_adversarial_archive(records: &[AdversarialRecord], dir: &Path) -> Result<()> {
    for sub in ["original", "perturbed"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut w = csv::Writer::from_path(dir.join("manifest.csv"))?;
    for r in records {
        save_png(&r.original, &dir.join("original").join(png_name(&r.id)))?;
        save_png(&r.perturbed, &dir.join("perturbed").join(png_name(&r.id)))?;
        w.serialize(ArchiveRow {
            id: r.id.clone(),
            attack: r.attack.clone(),
            true_label: r.true_label,
            original_label: r.original_label,
            perturbed_label: r.perturbed_label,
            success: r.success,
            linf: r.linf,
            l2: r.l2,
        })?;
    }
    w.flush().map_err(|e| Error::io(dir, e))
}

pub fn read_adversarial_archive(dir: &Path) -> Result<Vec<AdversarialRecord>> {
    let mut reader = csv::Reader::from_path(dir.join("manifest.csv"))?;
    reader
        .deserialize()
        .map(|row| {
            let row: ArchiveRow = row?;
            Ok(AdversarialRecord {
                original: load_png(&dir.join("original").join(png_name(&row.id)))?,
                perturbed: load_png(&dir.join("perturbed").join(png_name(&row.id)))?,
                id: row.id,
                attack: row.attack,
                true_label: row.true_label,
                original_label: row.original_label,
                perturbed_label: row.perturbed_label,
                success: row.success,
                linf: row.linf,
                l2: row.l2,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataSummary {
    pub name: String,
    pub counts: (usize, usize, usize),
    pub class_count: usize,
}

/// Results of a complete run.
pub struct ExperimentOutcome {
    pub data: DataSummary,
    pub classifier: TrainingMeta,
    pub generator: GeneratorMeta,
    pub store: FeatureStore,
    pub detector: HybridDetector,
    pub report: EvalReport,
    /// Test-split attack records by tag.
    pub records: BTreeMap<String, Vec<AdversarialRecord>>,
}

/// Runs every stage, reusing cached artifacts in `work_dir`, and writes the
/// feature store, detector bundle, adversarial archives and report there.
pub fn run_experiment(config: &ExperimentConfig, work_dir: &Path) -> Result<ExperimentOutcome> {
    config.validate()?;
    let ws = Workspace::new(work_dir)?;
    let data = load_data(&config.data)?;
    info!("data {} {:?}", data.name, data.counts());
    let models = train_models(&ws, config, &data)?;
    let attack_models = models.attack_models();
    let model_key = (&config.data, &config.classifier, &config.generator, &config.gmm, config.reject_quantile, config.reject_per_class);

    let (train_half, calibration_half) = detector_halves(&data.val, config.seed);
    let mut store = FeatureStore::default();
    for (split, samples) in [
        (FeatureSplit::Train, &train_half),
        (FeatureSplit::Calibration, &calibration_half),
        (FeatureSplit::Test, &data.test),
    ] {
        let name = format!("features-benign-{}", serde_json::to_value(split)?.as_str().unwrap_or("split"));
        let rows: Vec<FeatureRecord> = ws.cached(&name, &(&model_key, config.seed), || {
            benign_features(&models, samples, split, config.seed)
        })?;
        store.records.extend(rows);
    }

    let mut records = BTreeMap::new();
    let plans = [
        (FeatureSplit::Train, &train_half, &config.train_attacks, config.train_attack_images),
        (FeatureSplit::Test, &data.test, &config.test_attacks, config.test_attack_images),
    ];
    for (split, pool, tags, count) in plans {
        let split_name = serde_json::to_value(split)?.as_str().unwrap_or("split").to_string();
        let targets = correctly_classified(&models.classifier, pool, count, derive_seed(config.seed, &split_name))?;
        for tag in tags {
            let spec = config.attack_spec(tag)?;
            let key = (&model_key, &spec, count, config.seed, &split_name);
            let stem = format!("attacks-{split_name}-{tag}");
            let attacked: Vec<AdversarialRecord> = ws.cached(&stem, &key, || {
                let r = attack_all(&attack_models, &targets, &spec)?;
                info!("{split_name} {tag}: {} of {} successful", r.iter().filter(|r| r.success).count(), r.len());
                Ok(r)
            })?;
            let rows: Vec<FeatureRecord> = ws.cached(&format!("features-{split_name}-{tag}"), &key, || {
                adversarial_features(&models, &attacked, split, config.seed)
            })?;
            store.records.extend(rows);
            if split == FeatureSplit::Test {
                write_adversarial_archive(&attacked, &ws.path("archive").join(tag))?;
                records.insert(tag.clone(), attacked);
            }
        }
    }
    store.write(&ws.path("features.csv"))?;

    let detector = train_detector_from_store(&store, &config.train_attacks, &config.detector)?;
    detector.save(&ws.path("detector.json"))?;
    let mut model_hashes = Vec::new();
    for name in ["classifier", "generator", "gmm", "detector"] {
        model_hashes.push((name.to_string(), file_hash(&ws.path(&format!("{name}.json")))?));
    }
    let manifest = RunManifest {
        seeds: vec![
            ("master".into(), config.seed),
            ("classifier".into(), config.classifier.seed),
            ("generator".into(), config.generator.seed),
            ("gmm".into(), config.gmm.seed),
            ("forest".into(), config.detector.forest.seed),
            ("isolation".into(), config.detector.isolation.seed),
        ],
        model_hashes,
        tau: detector.tau.ok_or(Error::Uncalibrated)?,
        tnr: config.detector.tnr,
    };
    let report = evaluate_store(&store, &detector, &EvalSettings::from(config), manifest)?;
    crate::eval::write_report(&report, &ws.path("report"))?;
    info!("detector {} trained on {:?}", mask_name(&detector.mask), config.train_attacks);
    Ok(ExperimentOutcome {
        data: DataSummary {
            name: data.name.clone(),
            counts: data.counts(),
            class_count: data.class_count,
        },
        classifier: models.classifier.meta.clone(),
        generator: models.generator.meta.clone(),
        store,
        detector,
        report,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, "pgd-8"), derive_seed(7, "pgd-8"));
        assert_ne!(derive_seed(7, "pgd-8"), derive_seed(7, "pgd-4"));
        assert_ne!(derive_seed(7, "pgd-8"), derive_seed(8, "pgd-8"));
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn config_parses_partial_toml() {
        let c: ExperimentConfig = toml::from_str(
            r#"
            seed = 3
            test_attacks = ["pgd-8", "deepfool"]
            [data]
            kind = "synthetic"
            per_class = 20
            [classifier]
            epochs = 1
            "#,
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.classifier.epochs, 1);
        assert_eq!(c.classifier.rep_dim, ClassifierConfig::default().rep_dim);
        match &c.data {
            DataSource::Synthetic(s) => assert_eq!(s.per_class, 20),
            other => panic!("{other:?}"),
        }
        assert_eq!(c.attack_spec("pgd-8").unwrap().iterations, 40);
        c.validate().unwrap();
        assert_eq!(all_masks().len(), 15);
        assert!(ExperimentConfig { test_attacks: vec!["pgd".into()], ..c }.validate().is_err());
    }

    #[test]
    fn cache_reuses_only_on_matching_key() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path()).unwrap();
        let mut calls = 0;
        let a: Vec<u32> = ws.cached("x", &1, || { calls += 1; Ok(vec![1]) }).unwrap();
        let b: Vec<u32> = ws.cached("x", &1, || { calls += 1; Ok(vec![2]) }).unwrap();
        let c: Vec<u32> = ws.cached("x", &2, || { calls += 1; Ok(vec![3]) }).unwrap();
        assert_eq!((a, b, c, calls), (vec![1], vec![1], vec![3], 2));
    }

    #[test]
    fn halves_are_disjoint_and_exhaustive() {
        let data = synthesize(&SynthConfig { per_class: 20, ..SynthConfig::default() }).unwrap();
        let (a, b) = detector_halves(&data.val, 1);
        assert_eq!(a.len() + b.len(), data.val.len());
        assert!(a.iter().all(|s| b.iter().all(|t| t.id != s.id)));
        let again = detector_halves(&data.val, 1);
        assert_eq!(again.0.iter().map(|s| &s.id).collect::<Vec<_>>(), a.iter().map(|s| &s.id).collect::<Vec<_>>());
    }
}
