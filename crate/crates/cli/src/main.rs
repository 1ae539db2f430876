use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use viewguard::attacks::{AttackFamily, AttackSpec, Norm};
use viewguard::classifier::ClassifierModel;
use viewguard::data::{load_png, save_png, write_png_dataset, DatasetSplit, LabeledSample};
use viewguard::detector::{mask_name, HybridDetector, PredictorMask};
use viewguard::eval::{ablation_run, write_report, EvalReport, RunManifest};
use viewguard::experiment::{
    adversarial_features, attack_all, benign_features, correctly_classified, derive_seed, detector_halves, evaluate_store,
    feature_sets, file_hash, load_data, read_adversarial_archive, run_experiment, train_detector_from_store, train_models,
    write_adversarial_archive, EvalSettings, ExperimentConfig, Workspace,
};
use viewguard::features::{FeatureSplit, FeatureStore};
use viewguard::generator::{generate_rows, GenerativeModel};
use viewguard::io::write_json;
use viewguard::predictors::PREDICTOR_COUNT;
use viewguard::views::generate_views;

#[derive(Parser)]
#[command(name = "viewguard", version, about = "Multi-view adversarial image detection toolkit")]
struct Cli {
    /// Experiment configuration (TOML). Built-in desk defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides every stage seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Work directory holding cached models, features and reports.
    #[arg(long, global = true, default_value = "viewguard-work")]
    work: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeatureSplitArg {
    Train,
    Calibration,
    Test,
}

impl From<FeatureSplitArg> for FeatureSplit {
    fn from(s: FeatureSplitArg) -> Self {
        match s {
            FeatureSplitArg::Train => FeatureSplit::Train,
            FeatureSplitArg::Calibration => FeatureSplit::Calibration,
            FeatureSplitArg::Test => FeatureSplit::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the procedural shapes dataset as per-class PNG directories.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the victim classifier.
    TrainClassifier {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the class-conditional pixel model.
    TrainGenerator {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate rows below the first `seed_rows` rows of an image.
    Sample {
        #[arg(long)]
        label: usize,
        #[arg(long)]
        seed_rows: usize,
        /// Source of the seed rows; the first test image of `label` otherwise.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack correctly classified images and write an adversarial archive.
    Attack {
        #[arg(long)]
        family: String,
        /// Budget in 0-255 pixel units (L-infinity families).
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long = "in", value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the three views and G* for one image.
    GenViews {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        label: usize,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compute predictor features into a CSV feature store (appending).
    ExtractFeatures {
        /// Benign rows for the detector halves of the validation split and the test split.
        #[arg(long)]
        benign: bool,
        /// Adversarial archives to score.
        #[arg(long)]
        adv: Vec<PathBuf>,
        /// Split recorded for the adversarial rows.
        #[arg(long = "as", value_enum, default_value = "test")]
        split: FeatureSplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and calibrate the hybrid detector.
    TrainDetector {
        /// Feature store with benign `train` and `calibration` rows.
        #[arg(long)]
        benign: PathBuf,
        /// Feature store with adversarial `train` rows.
        #[arg(long)]
        adv: PathBuf,
        #[arg(long)]
        tnr: Option<f64>,
        /// Attack tags used for training; all training attacks in the store otherwise.
        #[arg(long)]
        attacks: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test rows of a feature store and write the report.
    Evaluate {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain the detector on predictor subsets and report per-attack AUC.
    Ablate {
        #[arg(long)]
        features: PathBuf,
        /// Masks such as `d3` or `d1+d2+d3+d4`; the configured masks otherwise.
        #[arg(long)]
        mask: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render tables and the ROC figure from a report directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Run the whole experiment in the work directory.
    Run,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let config = match &cli.config {
        Some(p) => ExperimentConfig::from_toml_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    let config = match cli.seed {
        Some(seed) => config.with_seed(seed),
        None => config,
    };
    config.validate()?;
    Ok(config)
}

fn parse_mask(s: &str) -> Result<PredictorMask> {
    let mut mask = [false; PREDICTOR_COUNT];
    for part in s.split('+') {
        let j: usize = part
            .trim()
            .strip_prefix('d')
            .and_then(|d| d.parse().ok())
            .filter(|j| (1..=PREDICTOR_COUNT).contains(j))
            .with_context(|| format!("bad predictor `{part}` in mask `{s}`"))?;
        mask[j - 1] = true;
    }
    Ok(mask)
}

fn samples<'a>(data: &'a DatasetSplit, split: SplitArg) -> &'a [LabeledSample] {
    match split {
        SplitArg::Train => &data.train,
        SplitArg::Val => &data.val,
        SplitArg::Test => &data.test,
    }
}

fn load_generator(ws: &Workspace, path: &Option<PathBuf>) -> Result<GenerativeModel> {
    let p = path.clone().unwrap_or_else(|| ws.path("generator.json"));
    GenerativeModel::load(&p).with_context(|| format!("loading generator {} (run train-generator first)", p.display()))
}

/// Every emitted record must respect its budget after rounding.
fn check_records(records: &[viewguard::attacks::AdversarialRecord], spec: &AttackSpec) -> Result<()> {
    if spec.family.norm() == Norm::Linf {
        for r in records {
            ensure!(
                f64::from(r.linf) <= spec.epsilon.floor(),
                "invariant violated: {} has L-inf {} > {}",
                r.id,
                r.linf,
                spec.epsilon
            );
        }
    }
    Ok(())
}

fn check_report(report: &EvalReport) -> Result<()> {
    for r in &report.rows {
        for (name, v) in [("adr", r.adr), ("bdr", r.bdr), ("auroc", r.auroc)] {
            ensure!((0.0..=1.0).contains(&v), "invariant violated: {name} {v} for {}", r.attack);
        }
    }
    for (attack, roc) in &report.roc {
        ensure!(roc.windows(2).all(|w| w[0].0 <= w[1].0), "invariant violated: ROC for {attack} is not monotone");
    }
    Ok(())
}

fn print_report(report: &EvalReport) {
    println!("attack\tSR\tADR\tBDR\tAUROC");
    for r in &report.rows {
        let flag = if r.severe { "\t(severe)" } else { "" };
        println!("{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}{flag}", r.attack, r.success_rate, r.adr, r.bdr, r.auroc);
    }
    if let Some(m) = &report.misclassified {
        println!(
            "misclassified benign AUC {:.3} [{:.3}, {:.3}] ({} vs {})",
            m.auc, m.ci_low, m.ci_high, m.misclassified, m.correct
        );
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = load_config(&cli)?;
    let ws = Workspace::new(&cli.work)?;
    match &cli.command {
        Command::MakeSynthetic { out } => {
            let viewguard::experiment::DataSource::Synthetic(synth) = &config.data else {
                bail!("make-synthetic needs a synthetic data source in the configuration");
            };
            let data = viewguard::synth::synthesize(synth)?;
            write_png_dataset(&data, out)?;
            let (a, b, c) = data.counts();
            println!("wrote {a}/{b}/{c} images to {}", out.display());
        }
        Command::TrainClassifier { out } => {
            let data = load_data(&config.data)?;
            let model: ClassifierModel = ws.cached("classifier", &(&config.data, &config.classifier), || {
                viewguard::classifier::train_classifier(&data, &config.classifier)
            })?;
            if let Some(out) = out {
                model.save(out)?;
            }
            println!("test accuracy {:.4}", model.meta.test_accuracy);
        }
        Command::TrainGenerator { out } => {
            let data = load_data(&config.data)?;
            let model: GenerativeModel = ws.cached("generator", &(&config.data, &config.generator), || {
                viewguard::generator::train_generator(&data, &config.generator)
            })?;
            if let Some(out) = out {
                model.save(out)?;
            }
            println!("test bits/dim {:.4}", model.meta.test_bits_per_dim);
        }
        Command::Sample {
            label,
            seed_rows,
            image,
            count,
            generator,
            out,
        } => {
            let model = load_generator(&ws, generator)?;
            let source = match image {
                Some(p) => load_png(p)?,
                None => {
                    let data = load_data(&config.data)?;
                    data.test
                        .iter()
                        .find(|s| s.label == *label)
                        .with_context(|| format!("no test image with label {label}"))?
                        .image
                        .clone()
                }
            };
            ensure!(*seed_rows < source.rows(), "seed rows must leave at least one row to generate");
            std::fs::create_dir_all(out)?;
            save_png(&source, &out.join("source.png"))?;
            for i in 0..*count {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("sample/{i}")));
                let img = generate_rows(&model, &source, *label, seed_rows + 1, source.rows(), &mut rng)?;
                save_png(&img, &out.join(format!("sample_{i}.png")))?;
            }
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Attack {
            family,
            eps,
            iters,
            split,
            count,
            out,
        } => {
            let fam = AttackFamily::parse(family).with_context(|| format!("unknown attack family `{family}`"))?;
            let tag = match (fam.norm(), eps) {
                (Norm::Linf, Some(e)) => format!("{family}-{e}"),
                (Norm::Linf, None) => bail!("--eps is required for {family}"),
                (Norm::L2, _) => family.clone(),
            };
            let mut spec = config.attack_spec(&tag)?;
            if let Some(t) = iters {
                spec.iterations = *t;
            }
            spec.validate()?;
            let data = load_data(&config.data)?;
            let models = train_models(&ws, &config, &data)?;
            let targets = correctly_classified(&models.classifier, samples(&data, *split), *count, derive_seed(config.seed, &tag))?;
            let records = attack_all(&models.attack_models(), &targets, &spec)?;
            check_records(&records, &spec)?;
            write_adversarial_archive(&records, out)?;
            let ok = records.iter().filter(|r| r.success).count();
            println!("{}: {ok}/{} successful, archive in {}", spec.tag(), records.len(), out.display());
        }
        Command::GenViews {
            image,
            label,
            generator,
            out_dir,
        } => {
            let model = load_generator(&ws, generator)?;
            let img = load_png(image)?;
            let views = generate_views(&model, &img, *label, config.seed)?;
            std::fs::create_dir_all(out_dir)?;
            for (name, v) in ["g1", "g2", "g3", "gstar"].iter().zip(views.all()) {
                save_png(v, &out_dir.join(format!("{name}.png")))?;
            }
            write_json(
                &out_dir.join("manifest.json"),
                &serde_json::json!({
                    "source": image,
                    "label_used": views.label_used,
                    "master_seed": config.seed,
                    "view_seeds": views.rng_seeds,
                }),
            )?;
            println!("wrote views to {}", out_dir.display());
        }
        Command::ExtractFeatures { benign, adv, split, out } => {
            let data = load_data(&config.data)?;
            let models = train_models(&ws, &config, &data)?;
            let mut store = if out.exists() { FeatureStore::read(out)? } else { FeatureStore::default() };
            if *benign {
                let (train_half, calibration_half) = detector_halves(&data.val, config.seed);
                for (s, set) in [
                    (FeatureSplit::Train, &train_half),
                    (FeatureSplit::Calibration, &calibration_half),
                    (FeatureSplit::Test, &data.test),
                ] {
                    info!("benign {s:?}: {} images", set.len());
                    store.records.extend(benign_features(&models, set, s, config.seed)?);
                }
            }
            for dir in adv {
                let records = read_adversarial_archive(dir)?;
                info!("{}: {} records", dir.display(), records.len());
                store.records.extend(adversarial_features(&models, &records, (*split).into(), config.seed)?);
            }
            store.write(out)?;
            println!("{} feature rows in {}", store.records.len(), out.display());
        }
        Command::TrainDetector {
            benign,
            adv,
            tnr,
            attacks,
            out,
        } => {
            let mut store = FeatureStore::read(benign)?;
            store.records.retain(|r| r.is_benign());
            store
                .records
                .extend(FeatureStore::read(adv)?.records.into_iter().filter(|r| !r.is_benign()));
            let attacks = if attacks.is_empty() { store.attacks(FeatureSplit::Train) } else { attacks.clone() };
            ensure!(!attacks.is_empty(), "no adversarial training rows in {}", adv.display());
            let mut detector_config = config.detector.clone();
            if let Some(t) = tnr {
                detector_config.tnr = *t;
            }
            let detector = train_detector_from_store(&store, &attacks, &detector_config)?;
            detector.save(out)?;
            println!("tau {:.6} ({}), trained on {:?}", detector.tau.unwrap_or(f64::NAN), mask_name(&detector.mask), attacks);
        }
        Command::Evaluate { features, detector, out } => {
            let store = FeatureStore::read(features)?;
            let det = HybridDetector::load(detector)?;
            let mut settings = EvalSettings::from(&config);
            settings.train_attacks = det.manifest.attack_sources.clone();
            settings.detector.tnr = det.manifest.tnr_target;
            if settings.train_attacks.iter().all(|t| store.adversarial(FeatureSplit::Train, t).is_empty()) {
                info!("no adversarial training rows in {}; ablation skipped", features.display());
                settings.ablation_masks.clear();
            }
            let manifest = RunManifest {
                seeds: vec![("master".into(), config.seed)],
                model_hashes: vec![
                    ("detector".into(), file_hash(detector)?),
                    ("features".into(), file_hash(features)?),
                ],
                tau: det.tau.context("detector is not calibrated")?,
                tnr: det.manifest.tnr_target,
            };
            let report = evaluate_store(&store, &det, &settings, manifest)?;
            check_report(&report)?;
            write_report(&report, out)?;
            print_report(&report);
        }
        Command::Ablate { features, mask, out } => {
            let store = FeatureStore::read(features)?;
            let masks = if mask.is_empty() {
                config.ablation_masks.clone()
            } else {
                mask.iter().map(|m| parse_mask(m)).collect::<Result<Vec<_>>>()?
            };
            let (sets, _) = feature_sets(&store, &config.train_attacks);
            let rows = ablation_run(&sets, &masks, &config.detector)?;
            let report = EvalReport {
                ablation: rows,
                ..EvalReport::default()
            };
            write_report(&report, out)?;
            println!("mask\tattack\tauc");
            for r in &report.ablation {
                println!("{}\t{}\t{:.3}", r.mask, r.attack, r.auc);
            }
        }
        Command::Report { dir } => {
            let report: EvalReport = viewguard::io::read_json(&dir.join("report.json"))?;
            check_report(&report)?;
            write_report(&report, dir)?;
            print_report(&report);
        }
        Command::Run => {
            let outcome = run_experiment(&config, &cli.work)?;
            check_report(&outcome.report)?;
            for (tag, records) in &outcome.records {
                check_records(records, &config.attack_spec(tag)?)?;
            }
            println!(
                "classifier test accuracy {:.4}; generator test bits/dim {:.4}",
                outcome.classifier.test_accuracy, outcome.generator.test_bits_per_dim
            );
            print_report(&outcome.report);
            println!("outputs in {}", cli.work.display());
        }
    }
    Ok(())
}
