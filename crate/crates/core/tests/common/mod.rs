#![allow(dead_code)]

pub mod oracle_checks;
pub mod property_checks;

use std::path::{Path, PathBuf};

use mvfmm::dataset::FunctionalDataset;
use mvfmm::ingest::{build_dataset, parse_long_csv, CsvSchema, PreprocessConfig};

pub fn tiny_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/tiny")
}

pub fn tiny_dataset() -> FunctionalDataset {
    let dir = tiny_dir();
    let (curves, covs) = parse_long_csv(
        dir.join("curves.csv"),
        dir.join("covariates.csv"),
        &CsvSchema::default(),
    )
    .unwrap();
    build_dataset(&curves, &covs, &PreprocessConfig::default())
        .unwrap()
        .dataset
}
