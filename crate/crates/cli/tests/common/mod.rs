#![allow(dead_code)]

use std::path::{Path, PathBuf};

use keymorph_core::detector::{init_weights, DetectorConfig};
use keymorph_core::synthdata::{generate_cohort, write_dataset, SyntheticSubject};
use keymorph_core::warp::{Image, LabelMap};
use keymorph_core::NdTensor;

pub const SHAPE: [usize; 2] = [32, 32];

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub weights: PathBuf,
    pub dataset: PathBuf,
    pub subjects: Vec<SyntheticSubject>,
}

impl Fixture {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn subject_file(&self, id: &str, file: &str) -> PathBuf {
        self.dataset.join("subjects").join(id).join(file)
    }
}

/// Untrained weights, three phantoms and one blank subject named `flat`.
pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DetectorConfig { input_shape: SHAPE.to_vec(), ..Default::default() };
    let weights = dir.path().join("model").join("weights.json");
    std::fs::create_dir_all(weights.parent().unwrap()).unwrap();
    init_weights(&cfg, 0).unwrap().save(&weights).unwrap();
    let mut subjects = generate_cohort(0, 3, &SHAPE).unwrap();
    let blank = Image::from_spatial(NdTensor::zeros(&SHAPE)).unwrap();
    subjects.push(SyntheticSubject {
        id: "flat".into(),
        seed: 99,
        labels: LabelMap::new(NdTensor::zeros(&SHAPE)).unwrap(),
        modalities: vec![blank.clone(), blank.clone(), blank],
    });
    let dataset = dir.path().join("data");
    write_dataset(&dataset, &subjects).unwrap();
    Fixture { dir, weights, dataset, subjects }
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}
