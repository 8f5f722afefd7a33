//! Multivariate FPCA of the bundled dataset: scree table and checks on the
//! eigenfunctions.

use std::path::Path;

use mvfmm::ingest::{build_dataset, parse_long_csv, CsvSchema, PreprocessConfig};
use mvfmm::mvfpca::{mvfpca_fit, FpcaOptions};

fn main() -> mvfmm::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/tiny");
    let (curves, covariates) = parse_long_csv(
        dir.join("curves.csv"),
        dir.join("covariates.csv"),
        &CsvSchema::default(),
    )?;
    let data = build_dataset(&curves, &covariates, &PreprocessConfig::default())?.dataset;

    for pve in [0.9, 0.99, 0.9999] {
        let basis = mvfpca_fit(
            &data.coefficients,
            FpcaOptions {
                pve_target: pve,
                k_max: None,
            },
        )?;
        println!("PVE target {pve}: {} components", basis.k());
    }
    let basis = mvfpca_fit(&data.coefficients, FpcaOptions::default())?;
    println!("{:>3} {:>12} {:>10}", "k", "eigenvalue", "cum. PVE");
    for row in basis.scree_report() {
        println!(
            "{:>3} {:>12.3} {:>10.5}",
            row.k, row.eigenvalue, row.cumulative_pve
        );
    }
    println!("orthonormality error: {:.2e}", basis.orthonormality_error());
    Ok(())
}
