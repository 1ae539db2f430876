//! Persistent feature store: one CSV row per scored image.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictors::{FeatureVector, PREDICTOR_COUNT};

/// Attack tag used for unperturbed images.
pub const BENIGN: &str = "benign";

/// Which stage of detector construction a row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSplit {
    /// Trains the forest and the isolation forest.
    Train,
    /// Benign points that set the threshold.
    Calibration,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub image_id: String,
    pub split: FeatureSplit,
    pub attack: String,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub d4: f64,
    pub label_used: usize,
    pub true_label: usize,
    /// For adversarial rows, whether the attack flipped a correct prediction.
    pub success: bool,
    pub seed: u64,
}

impl FeatureRecord {
    pub fn new(fv: &FeatureVector, split: FeatureSplit, attack: &str, true_label: usize, success: bool, seed: u64) -> Self {
        Self {
            image_id: fv.image_id.clone(),
            split,
            attack: attack.to_string(),
            d1: fv.d[0],
            d2: fv.d[1],
            d3: fv.d[2],
            d4: fv.d[3],
            label_used: fv.label_used,
            true_label,
            success,
            seed,
        }
    }

    pub fn d(&self) -> [f64; PREDICTOR_COUNT] {
        [self.d1, self.d2, self.d3, self.d4]
    }

    pub fn is_benign(&self) -> bool {
        self.attack == BENIGN
    }

    /// Benign rows the classifier gets right.
    pub fn correctly_classified(&self) -> bool {
        self.label_used == self.true_label
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureStore {
    pub records: Vec<FeatureRecord>,
}

impl FeatureStore {
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let records = r.deserialize().collect::<std::result::Result<Vec<FeatureRecord>, _>>()?;
        Ok(Self { records })
    }

    pub fn rows<'a>(&'a self, split: FeatureSplit, attack: &'a str) -> impl Iterator<Item = &'a FeatureRecord> + 'a {
        self.records.iter().filter(move |r| r.split == split && r.attack == attack)
    }

    pub fn benign(&self, split: FeatureSplit) -> Vec<[f64; PREDICTOR_COUNT]> {
        self.rows(split, BENIGN).map(FeatureRecord::d).collect()
    }

    /// Features of successful attacks only.
    pub fn adversarial(&self, split: FeatureSplit, attack: &str) -> Vec<[f64; PREDICTOR_COUNT]> {
        self.rows(split, attack).filter(|r| r.success).map(FeatureRecord::d).collect()
    }

    /// Attack tags present in `split`, in first-seen order.
    pub fn attacks(&self, split: FeatureSplit) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in self.records.iter().filter(|r| r.split == split && !r.is_benign()) {
            if !out.contains(&r.attack) {
                out.push(r.attack.clone());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_is_exact() {
        let fv = FeatureVector {
            image_id: "disk_00001".into(),
            label_used: 3,
            d: [0.1, 1.0 / 3.0, -1234.567_890_123, f64::MIN_POSITIVE],
        };
        let store = FeatureStore {
            records: vec![
                FeatureRecord::new(&fv, FeatureSplit::Test, BENIGN, 3, false, 7),
                FeatureRecord::new(&fv, FeatureSplit::Train, "pgd-4", 2, true, 9),
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        store.write(&path).unwrap();
        let back = FeatureStore::read(&path).unwrap();
        assert_eq!(back, store);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("image_id,split,attack,d1,d2,d3,d4,label_used,true_label,success,seed"));
        assert_eq!(back.benign(FeatureSplit::Test).len(), 1);
        assert_eq!(back.adversarial(FeatureSplit::Train, "pgd-4").len(), 1);
        assert_eq!(back.attacks(FeatureSplit::Train), vec!["pgd-4".to_string()]);
    }
}
