use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn viewguard(work: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_viewguard"))
        .arg("--config")
        .arg(smoke_config())
        .arg("--work")
        .arg(work)
        .args(args)
        .output()
        .unwrap()
}

fn ok(work: &Path, args: &[&str]) -> String {
    let out = viewguard(work, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn staged_workflow_matches_verbs() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("work");
    let p = |name: &str| dir.path().join(name);

    ok(&work, &["make-synthetic", "--out", s(&p("data"))]);
    assert!(p("data/dataset.toml").exists());
    assert!(p("data/disk").is_dir());

    ok(&work, &["train-classifier"]);
    let gen = ok(&work, &["train-generator"]);
    assert!(gen.contains("bits/dim"));

    ok(&work, &["sample", "--label", "2", "--seed-rows", "4", "--count", "2", "--out", s(&p("samples"))]);
    assert!(p("samples/sample_1.png").exists());

    ok(&work, &["gen-views", "--image", s(&p("samples/source.png")), "--label", "2", "--out-dir", s(&p("views"))]);
    for name in ["g1", "g2", "g3", "gstar"] {
        assert!(p(&format!("views/{name}.png")).exists());
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("views/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["label_used"], 2);

    ok(&work, &["attack", "--family", "pgd", "--eps", "8", "--iters", "3", "--in", "val", "--count", "15", "--out", s(&p("adv-train"))]);
    ok(&work, &["attack", "--family", "fgsm", "--eps", "8", "--count", "10", "--out", s(&p("adv-test"))]);
    assert!(p("adv-test/manifest.csv").exists());

    ok(&work, &["extract-features", "--benign", "--out", s(&p("benign.csv"))]);
    ok(&work, &["extract-features", "--adv", s(&p("adv-train")), "--as", "train", "--out", s(&p("adv.csv"))]);
    ok(&work, &["extract-features", "--adv", s(&p("adv-test")), "--as", "test", "--out", s(&p("benign.csv"))]);

    ok(&work, &["train-detector", "--benign", s(&p("benign.csv")), "--adv", s(&p("adv.csv")), "--tnr", "0.95", "--out", s(&p("detector.json"))]);
    let report = ok(&work, &["evaluate", "--features", s(&p("benign.csv")), "--detector", s(&p("detector.json")), "--out", s(&p("report"))]);
    assert!(report.contains("pgd-8") || report.contains("fgsm-8"), "{report}");
    assert!(p("report/report.json").exists());
    ok(&work, &["report", "--dir", s(&p("report"))]);

    let mut all = std::fs::read_to_string(p("benign.csv")).unwrap();
    all.extend(std::fs::read_to_string(p("adv.csv")).unwrap().lines().skip(1).map(|l| format!("{l}\n")));
    std::fs::write(p("all.csv"), all).unwrap();
    let ablate = ok(&work, &["ablate", "--features", s(&p("all.csv")), "--mask", "d3", "--mask", "d1+d2+d3+d4", "--out", s(&p("ablation"))]);
    assert!(ablate.contains("d1+d2+d3+d4"), "{ablate}");
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("work");
    let missing = dir.path().join("nope.csv");

    let out = viewguard(&work, &["ablate", "--features", s(&missing), "--mask", "d5", "--out", s(dir.path())]);
    assert!(!out.status.success());

    let out = viewguard(&work, &["attack", "--family", "laser", "--eps", "4", "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("laser"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "test_attacks = [\"pgd\"]\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_viewguard"))
        .args(["--config", s(&bad), "run"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
