use std::path::Path;

use viewguard::data::{load_dataset, save_png, write_png_dataset, DatasetConfig, DatasetFormat, FlatImage, SplitFractions};
use viewguard::synth::{synthesize, SynthConfig, CLASS_NAMES};
use viewguard::Error;

fn write_classes(root: &Path, classes: usize, per_class: usize) {
    for c in 0..classes {
        for i in 0..per_class {
            let pixels = (0..4 * 4 * 3).map(|k| ((c * 37 + i * 11 + k) % 256) as u8).collect();
            let img = FlatImage::new(pixels, 4, 4, 3).unwrap();
            save_png(&img, &root.join(format!("c{c}")).join(format!("{i:03}.png"))).unwrap();
        }
    }
}

fn config(root: &Path, classes: usize, seed: u64) -> DatasetConfig {
    DatasetConfig {
        path: root.to_path_buf(),
        format: DatasetFormat::PngDirs,
        class_count: classes,
        classes: Some((0..classes).map(|c| format!("c{c}")).collect()),
        split: SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        },
        seed,
        manifest: None,
        per_class_limit: None,
        name: None,
    }
}

#[test]
fn fractions_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    write_classes(dir.path(), 10, 100);
    let a = load_dataset(&config(dir.path(), 10, 7)).unwrap();
    assert_eq!(a.counts(), (800, 100, 100));
    let b = load_dataset(&config(dir.path(), 10, 7)).unwrap();
    assert_eq!(a.manifest(), b.manifest());
    assert_eq!(a.test[3].image, b.test[3].image);
    let c = load_dataset(&config(dir.path(), 10, 8)).unwrap();
    assert_ne!(a.manifest(), c.manifest());

    let ids = |s: &[viewguard::data::LabeledSample]| s.iter().map(|x| x.id.clone()).collect::<std::collections::HashSet<_>>();
    let (tr, va, te) = (ids(&a.train), ids(&a.val), ids(&a.test));
    assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
    assert_eq!(tr.len() + va.len() + te.len(), 1000);
}

#[test]
fn missing_class_is_named() {
    let dir = tempfile::tempdir().unwrap();
    write_classes(dir.path(), 9, 5);
    match load_dataset(&config(dir.path(), 10, 0)) {
        Err(Error::MissingClass(name)) => assert_eq!(name, "c9"),
        other => panic!("expected a missing-class error, got {other:?}"),
    }
}

#[test]
fn mixed_dimensions_and_bad_rows_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_classes(dir.path(), 2, 3);
    let odd = FlatImage::new(vec![0; 8 * 4 * 3], 8, 4, 3).unwrap();
    save_png(&odd, &dir.path().join("c1").join("odd.png")).unwrap();
    assert!(matches!(load_dataset(&config(dir.path(), 2, 0)), Err(Error::NonUniformDimensions(_))));

    let dir = tempfile::tempdir().unwrap();
    let six = FlatImage::new(vec![0; 6 * 4], 6, 4, 1).unwrap();
    save_png(&six, &dir.path().join("c0").join("a.png")).unwrap();
    assert!(matches!(load_dataset(&config(dir.path(), 1, 0)), Err(Error::RowsNotDivisibleByFour { rows: 6 })));
}

#[test]
fn written_dataset_reloads_with_its_manifest() {
    let data = synthesize(&SynthConfig {
        per_class: 10,
        ..SynthConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_png_dataset(&data, dir.path()).unwrap();
    let back = load_dataset(&DatasetConfig::from_toml_file(&dir.path().join("dataset.toml")).unwrap()).unwrap();
    assert_eq!(back.counts(), data.counts());
    assert_eq!(back.class_names, CLASS_NAMES.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    let mut a = data.manifest();
    let mut b = back.manifest();
    let stem = |id: &str| id.rsplit('/').next().unwrap().to_string();
    a.iter_mut().for_each(|(id, _)| *id = stem(id));
    b.iter_mut().for_each(|(id, _)| *id = stem(id));
    a.sort();
    b.sort();
    assert_eq!(a, b);
}
