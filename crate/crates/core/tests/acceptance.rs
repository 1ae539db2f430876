//! Acceptance suite. Criteria 1-7 are exact oracles and must hold; 8-14 come
//! from the desk-scale experiment and are reported as PASS/FAIL lines. Set
//! `VIEWGUARD_STRICT=1` to make desk failures fail the test as well.
//!
//! The desk run uses the procedural 16x16 shapes dataset (6000 images) in
//! place of a CIFAR-10 subset. Its artifacts are cached under
//! `target/viewguard-desk`; a cold run takes roughly fifteen minutes on one core.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use viewguard::attacks::{
    cw_objective, deepfool_step, fgsm_step, mim_trajectory, pgd_trajectory, whitebox_trajectory, AttackSpec, RejectThresholds,
};
use viewguard::classifier::{ClassifierConfig, ClassifierModel, LinearModel, Victim};
use viewguard::data::{FlatImage, Shape};
use viewguard::detector::{
    anomaly_score, average_path_length, decide_score, threshold_for_tnr, DecisionTree, HarmonicConvention, RandomForest, TreeNode,
    ADVERSARIAL, BENIGN,
};
use viewguard::eval::{adr_at_tnr, auroc, EvalReport};
use viewguard::experiment::{run_experiment, ExperimentConfig};
use viewguard::generator::{GenerativeModel, GeneratorConfig, PixelModel};
use viewguard::predictors::{d2_from_probs, euclidean, kl, GaussianComponent, GmmModel, Mixture};
use viewguard::views::{assemble_gstar, band_plan, generate_views};

/// Writes past the test harness's output capture so the sheet shows up in
/// plain `cargo test` logs.
fn say(line: &str) {
    let _ = writeln!(std::io::stderr().lock(), "{line}");
}

struct Sheet {
    failed: Vec<String>,
}

impl Sheet {
    fn line(&mut self, id: u32, name: &str, ok: bool, detail: String) {
        say(&format!("{} [{id:>2}] {name}: {detail}", if ok { "PASS" } else { "FAIL" }));
        if !ok {
            self.failed.push(format!("{id} {name}"));
        }
    }
}

fn random_image(rng: &mut ChaCha8Rng, shape: Shape) -> FlatImage {
    FlatImage::new((0..shape.len()).map(|_| rng.gen()).collect(), shape.rows, shape.cols, shape.channels).unwrap()
}

fn causality(sheet: &mut Sheet) {
    let start = Instant::now();
    let shape = Shape::new(16, 16, 3);
    let model = GenerativeModel::new(shape, 10, &GeneratorConfig { seed: 1, ..GeneratorConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut bad = 0;
    for _ in 0..100 {
        let img = random_image(&mut rng, shape);
        let i = rng.gen_range(0..shape.len() - 1);
        let j = rng.gen_range(i + 1..shape.len());
        let label = rng.gen_range(0..10);
        let before = model.conditional(&img, label, i);
        let mut flipped = img.clone();
        flipped.pixels_mut()[j] = flipped.pixels()[j].wrapping_add(rng.gen_range(1..=255));
        let after = model.conditional(&flipped, label, i);
        if before.iter().zip(&after).any(|(a, b)| a.to_bits() != b.to_bits()) {
            bad += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    sheet.line(1, "generator causality", bad == 0 && secs < 300.0, format!("{bad}/100 triples changed, {secs:.1}s"));
}

fn view_geometry(sheet: &mut Sheet) {
    let plan = band_plan(32).unwrap();
    let bands: Vec<(usize, usize)> = plan.bands.iter().map(|b| (b.start, b.end)).collect();
    let plan_ok = bands == [(9, 16), (17, 24), (25, 32)];

    let shape = Shape::new(8, 4, 3);
    let model = GenerativeModel::new(shape, 3, &GeneratorConfig { hidden: 6, layers: 1, head_hidden: 6, ..GeneratorConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut mismatches = 0;
    for trial in 0..100 {
        let img = random_image(&mut rng, shape);
        let vs = generate_views(&model, &img, trial % 3, trial as u64).unwrap();
        // oracle: top quarter from the source, quarter k+1 from view k
        let row = shape.cols * shape.channels;
        let mut expected = Vec::new();
        for r in 0..shape.rows {
            let src = match r / (shape.rows / 4) {
                0 => &img,
                q => vs.views()[q - 1],
            };
            expected.extend_from_slice(&src.pixels()[r * row..(r + 1) * row]);
        }
        let direct = assemble_gstar(&img, vs.views()[0], vs.views()[1], vs.views()[2]).unwrap();
        if vs.gstar.pixels() != expected.as_slice() || direct != vs.gstar {
            mismatches += 1;
        }
    }
    sheet.line(2, "view geometry", plan_ok && mismatches == 0, format!("bands(32) = {bands:?}; G* splice mismatches {mismatches}/100"));
}

fn predictor_oracles(sheet: &mut Sheet) {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut kl_err: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(2..20);
        let norm = |v: Vec<f64>| {
            let t: f64 = v.iter().sum();
            v.into_iter().map(|x| x / t).collect::<Vec<f64>>()
        };
        let p = norm((0..n).map(|_| rng.gen_range(0.01..1.0)).collect());
        let q = norm((0..n).map(|_| rng.gen_range(0.01..1.0)).collect());
        let direct: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
        kl_err = kl_err.max((kl(&p, &q).unwrap() - direct).abs());
    }

    let mut gmm_err: f64 = 0.0;
    for _ in 0..100 {
        let dim = rng.gen_range(1..6);
        let k = rng.gen_range(1..5);
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let components: Vec<GaussianComponent> = raw
            .iter()
            .map(|w| GaussianComponent {
                weight: w / total,
                mean: (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                variance: (0..dim).map(|_| rng.gen_range(0.3..2.0)).collect(),
            })
            .collect();
        let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let oracle = components
            .iter()
            .map(|c| {
                c.weight
                    * (0..dim)
                        .map(|j| {
                            (-(x[j] - c.mean[j]).powi(2) / (2.0 * c.variance[j])).exp() / (2.0 * std::f64::consts::PI * c.variance[j]).sqrt()
                        })
                        .product::<f64>()
            })
            .sum::<f64>()
            .ln();
        gmm_err = gmm_err.max((Mixture { components }.log_density(&x) - oracle).abs());
    }

    let d1 = euclidean(&[0.0, 0.0], &[3.0, 4.0]);
    let half = [0.5, 0.5];
    let d2 = d2_from_probs(&[1.0, 0.0], &[&half, &half, &half, &half]).unwrap();
    let ok = kl_err <= 1e-10 && gmm_err <= 1e-8 && d1 == 5.0 && (d2 - 4.0 * 2f64.ln()).abs() <= 1e-9;
    sheet.line(3, "predictor oracles", ok, format!("KL err {kl_err:.1e}, GMM err {gmm_err:.1e}, D1 {d1}, D2 - 4 ln 2 = {:.1e}", d2 - 4.0 * 2f64.ln()));
}

fn detector_mechanics(sheet: &mut Sheet) {
    let stump = |feature, threshold, left, right| DecisionTree {
        nodes: vec![
            TreeNode::Split { feature, threshold, left: 1, right: 2 },
            TreeNode::Leaf { class: left },
            TreeNode::Leaf { class: right },
        ],
    };
    let forest = RandomForest::from_trees(vec![
        stump(0, 0.0, BENIGN, ADVERSARIAL),
        stump(1, 1.0, ADVERSARIAL, BENIGN),
        stump(0, 2.0, BENIGN, ADVERSARIAL),
        stump(1, -1.0, ADVERSARIAL, BENIGN),
    ])
    .unwrap();
    // (1, 0): adv, adv, benign, benign
    let rf_ok = forest.benign_proportion(&[1.0, 0.0]) == 0.5 && forest.benign_proportion(&[3.0, -2.0]) == 0.0;

    let c = average_path_length(256, HarmonicConvention::Approximate);
    let if_ok = anomaly_score(c, c) == 0.5;

    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let mut worst: f64 = 0.0;
    for n in [100usize, 137, 500, 1000] {
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
        for tnr in [0.5, 0.9, 0.95, 0.99] {
            let tau = threshold_for_tnr(&scores, tnr).unwrap();
            let got = scores.iter().filter(|&&s| s > tau).count() as f64 / n as f64;
            worst = worst.max((got - tnr).abs() * n as f64);
        }
    }
    let tie_ok = decide_score(1.5, 1.5) == ADVERSARIAL && decide_score(1.5 + 1e-12, 1.5) == BENIGN;
    sheet.line(
        4,
        "detector mechanics",
        rf_ok && if_ok && worst <= 1.0 + 1e-9 && tie_ok,
        format!("P_RF tally {rf_ok}, P_IF(E=c) = {}, worst TNR miss {worst:.2}/N, tie -> adversarial {tie_ok}", anomaly_score(c, c)),
    );
}

fn small_classifier(shape: Shape, classes: usize, seed: u64) -> ClassifierModel {
    let config = ClassifierConfig { stem_width: 4, mid_width: 6, rep_dim: 8, seed, ..ClassifierConfig::default() };
    ClassifierModel::new(shape, classes, &config)
}

fn attack_oracles(sheet: &mut Sheet) {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let shape = Shape::new(8, 8, 3);
    let clf = small_classifier(shape, 3, 1);
    let x0 = random_image(&mut rng, shape).normalized();
    let grad = clf.loss_and_gradient(&x0, 1).1;
    let fgsm_identity = fgsm_step(&x0, &grad, 0.0) == x0;

    let spec = AttackSpec::pgd(8.0);
    let eps = 8.0 / 255.0;
    let traj = pgd_trajectory(&clf, &x0, 1, &spec);
    let in_ball = traj
        .iter()
        .all(|x| x.iter().zip(&x0).all(|(a, b)| (a - b).abs() <= eps + 1e-15 && (0.0..=1.0).contains(a)));
    let one = pgd_trajectory(&clf, &x0, 1, &AttackSpec { iterations: 1, ..spec.clone() });
    let pgd1_fgsm = one[0] == fgsm_step(&x0, &grad, eps);

    let lin = LinearModel::binary(&[0.3, -1.2, 0.8], 0.1);
    let x = [0.4, 0.2, 0.7];
    let f = 0.3 * x[0] - 1.2 * x[1] + 0.8 * x[2] + 0.1;
    let w = [0.3, -1.2, 0.8];
    let wn2: f64 = w.iter().map(|v| v * v).sum();
    let r = deepfool_step(&lin, &x);
    let df_err = r.iter().zip(&w).map(|(ri, wi)| (ri + f / wn2 * wi).abs()).fold(0.0, f64::max);

    let cw = cw_objective(&[2.0, 5.0], 1, 0.5);

    let generator = GenerativeModel::new(shape, 3, &GeneratorConfig { hidden: 6, layers: 1, head_hidden: 6, ..GeneratorConfig::default() });
    let gmm = GmmModel {
        classes: (0..3)
            .map(|_| Mixture { components: vec![GaussianComponent { weight: 1.0, mean: vec![0.0; 8], variance: vec![1.0; 8] }] })
            .collect(),
    };
    let th = RejectThresholds { pixel: vec![0.0; 3], latent: vec![0.0; 3] };
    let wb_spec = AttackSpec { wb_alpha: 0.0, wb_beta: 0.0, ..AttackSpec::whitebox(8.0) };
    let wb = whitebox_trajectory(&clf, &generator, &gmm, &th, &x0, 1, &wb_spec);
    let wb_same = wb == traj;

    let constant = LinearModel::binary(&[0.7, -0.4, 0.2, 0.9], 0.1);
    let c0 = [0.3, 0.6, 0.5, 0.2];
    let mim_same = mim_trajectory(&constant, &c0, 0, &AttackSpec::mim(8.0)) == pgd_trajectory(&constant, &c0, 0, &AttackSpec::pgd(8.0));

    let ok = fgsm_identity && in_ball && pgd1_fgsm && df_err <= 1e-6 && cw == -0.5 && wb_same && mim_same;
    sheet.line(
        5,
        "attack oracles",
        ok,
        format!(
            "FGSM eps=0 identity {fgsm_identity}, PGD in ball {in_ball}, PGD(T=1)=FGSM {pgd1_fgsm}, DeepFool err {df_err:.1e}, C&W {cw}, whitebox(0,0)=PGD-8 {wb_same}, MIM const = PGD {mim_same}"
        ),
    );
}

fn metric_oracles(sheet: &mut Sheet) {
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    let mut exact = true;
    for _ in 0..50 {
        let nb = rng.gen_range(1..100);
        let na = rng.gen_range(1..100);
        let b: Vec<f64> = (0..nb).map(|_| f64::from(rng.gen_range(0..15))).collect();
        let a: Vec<f64> = (0..na).map(|_| f64::from(rng.gen_range(0..15))).collect();
        let mut wins = 0.0;
        for &x in &a {
            for &y in &b {
                wins += if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 };
            }
        }
        exact &= auroc(&b, &a).unwrap() == wins / (na * nb) as f64;
    }
    let fixture = auroc(&[1.0, 3.0], &[2.0, 4.0]).unwrap();

    let n = 4000;
    let benign: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let adversarial: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let adr = adr_at_tnr(&benign, &adversarial, 0.95).unwrap();
    // binomial standard error of a 0.05 rate at n = 4000 is about 0.0034
    let adr_ok = (adr - 0.05).abs() <= 4.0 * (0.05f64 * 0.95 / n as f64).sqrt();
    sheet.line(6, "metric oracles", exact && fixture == 0.75 && adr_ok, format!("pairwise exact {exact}, auroc({{1,3}},{{2,4}}) = {fixture}, ADR@0.95 same dist {adr:.4}"));
}

fn classifier_gradient(sheet: &mut Sheet) {
    let mut rng = ChaCha8Rng::seed_from_u64(700);
    let shape = Shape::new(16, 16, 3);
    let clf = ClassifierModel::new(shape, 10, &ClassifierConfig { seed: 3, ..ClassifierConfig::default() });
    let x: Vec<f64> = (0..shape.len()).map(|_| rng.gen()).collect();
    let (_, g) = clf.loss_and_gradient(&x, 4);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for _ in 0..20 {
        let i = rng.gen_range(0..x.len());
        probe[i] = x[i] + h;
        let up = clf.loss_and_gradient(&probe, 4).0;
        probe[i] = x[i] - h;
        let down = clf.loss_and_gradient(&probe, 4).0;
        probe[i] = x[i];
        let num = (up - down) / (2.0 * h);
        worst = worst.max((num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-6));
    }
    sheet.line(7, "classifier gradient vs finite differences", worst <= 1e-3, format!("worst relative error {worst:.2e} over 20 coordinates"));
}

fn auc_of(report: &EvalReport, attack: &str) -> Option<f64> {
    report.rows.iter().find(|r| r.attack == attack).map(|r| r.auroc)
}

fn ablation(report: &EvalReport, mask: &str, attack: &str) -> Option<f64> {
    report.ablation.iter().find(|r| r.mask == mask && r.attack == attack).map(|r| r.auc)
}

fn desk(sheet: &mut Sheet) {
    let work = std::env::var_os("VIEWGUARD_DESK_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/viewguard-desk"));
    let start = Instant::now();
    let out = run_experiment(&ExperimentConfig::default(), &work).expect("desk experiment runs");
    say(&format!("desk run: {} {:?} in {:.0}s, artifacts in {}", out.data.name, out.data.counts, start.elapsed().as_secs_f64(), work.display()));
    let r = &out.report;

    let acc = out.classifier.test_accuracy;
    let bpd = out.generator.test_bits_per_dim;
    sheet.line(8, "classifier accuracy and generator bits/dim", acc >= 0.60 && bpd < 6.0 && bpd < 8.0, format!("accuracy {acc:.4} (>= 0.60), bits/dim {bpd:.3} (< 6.0)"));

    let sr = |a: &str| r.rows.iter().find(|x| x.attack == a).map_or(0.0, |x| x.success_rate);
    let (f16, p8) = (sr("fgsm-16"), sr("pgd-8"));
    sheet.line(9, "attack success rates", f16 >= 0.5 && p8 >= 0.5, format!("FGSM-16 {f16:.2}, PGD-8 {p8:.2} (>= 0.50)"));

    let a = |t: &str| auc_of(r, t).unwrap_or(0.0);
    let (f4, f8, f16a, p16) = (a("fgsm-4"), a("fgsm-8"), a("fgsm-16"), a("pgd-16"));
    let monotone = f8 >= f4 - 0.03 && f16a >= f8 - 0.03;
    sheet.line(
        10,
        "detection AUROC at desk scale",
        f16a >= 0.85 && p16 >= 0.85 && monotone,
        format!("FGSM-16 {f16a:.4}, PGD-16 {p16:.4} (>= 0.85); FGSM eps 4/8/16: {f4:.3}/{f8:.3}/{f16a:.3} monotone within 0.03: {monotone}"),
    );

    let full = "d1+d2+d3+d4";
    let ab = |m: &str, t: &str| ablation(r, m, t).unwrap_or(f64::NAN);
    let (full_df, d3_df) = (ab(full, "deepfool"), ab("d3", "deepfool"));
    let (d3_p4, d2_p4) = (ab("d3", "pgd-4"), ab("d2", "pgd-4"));
    sheet.line(
        11,
        "ablation direction",
        full_df - d3_df >= 0.10 && d3_p4 > d2_p4,
        format!("DeepFool full {full_df:.3} vs d3 {d3_df:.3} (gap >= 0.10); PGD-4 d3 {d3_p4:.3} vs d2 {d2_p4:.3}"),
    );

    let (d3_wb, d3_p8) = (ab("d3", "whitebox-8"), ab("d3", "pgd-8"));
    let wb_full = a("whitebox-8");
    sheet.line(
        12,
        "white-box evasion direction",
        d3_p8 - d3_wb >= 0.10 && wb_full >= 0.70,
        format!("d3-only AUC whitebox-8 {d3_wb:.3} vs PGD-8 {d3_p8:.3} (drop >= 0.10); full AUROC whitebox-8 {wb_full:.3} (>= 0.70)"),
    );

    let mim = a("mim-8");
    sheet.line(13, "generalization to MIM-8", mim >= 0.75, format!("AUROC {mim:.4} (>= 0.75), trained on {:?}", out.detector.manifest.attack_sources));

    match &r.misclassified {
        Some(m) => sheet.line(
            14,
            "misclassified benign AUC",
            m.auc > 0.5 && m.ci_low > 0.5,
            format!("AUC {:.3}, 95% CI [{:.3}, {:.3}]", m.auc, m.ci_low, m.ci_high),
        ),
        None => sheet.line(14, "misclassified benign AUC", false, "no misclassified test images".into()),
    }
}

#[test]
fn acceptance() {
    let mut oracles = Sheet { failed: Vec::new() };
    causality(&mut oracles);
    view_geometry(&mut oracles);
    predictor_oracles(&mut oracles);
    detector_mechanics(&mut oracles);
    attack_oracles(&mut oracles);
    metric_oracles(&mut oracles);
    classifier_gradient(&mut oracles);

    let mut desk_sheet = Sheet { failed: Vec::new() };
    desk(&mut desk_sheet);

    say(&format!("summary: oracle failures {:?}; desk failures {:?}", oracles.failed, desk_sheet.failed));
    assert!(oracles.failed.is_empty(), "oracle criteria failed: {:?}", oracles.failed);
    if std::env::var("VIEWGUARD_STRICT").is_ok_and(|v| v == "1") {
        assert!(desk_sheet.failed.is_empty(), "desk criteria failed: {:?}", desk_sheet.failed);
    }
}
