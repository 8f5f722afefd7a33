//! Fit the bivariate model to the bundled 8-subject dataset and print the
//! retained components, ICC and a few values of each effect function.

use std::path::Path;

use mvfmm::ingest::{build_dataset, parse_long_csv, CsvSchema, PreprocessConfig};
use mvfmm::model::{fit_model, FitOptions, ModelSpec};
use mvfmm::numeric::percent_grid;

fn main() -> mvfmm::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/tiny");
    let (curves, covariates) = parse_long_csv(
        dir.join("curves.csv"),
        dir.join("covariates.csv"),
        &CsvSchema::default(),
    )?;
    let data = build_dataset(&curves, &covariates, &PreprocessConfig::default())?.dataset;
    println!("{} observations from {} curves", data.len(), curves.len());

    let spec = ModelSpec::default()
        .categorical("sex", 0)
        .continuous("speed");
    let model = fit_model(&data, &spec, FitOptions::default())?;
    println!("retained components: {}", model.basis.k());
    println!("ICC: {:.3}", model.icc);

    let grid = percent_grid();
    let labels = model.labels();
    for (a, name) in model.effect_names().iter().enumerate() {
        let f = model.effect_function(a, &grid)?;
        for (p, label) in labels.iter().enumerate() {
            let v: Vec<String> = [0, 25, 50, 75, 100]
                .iter()
                .map(|&i| format!("{:7.2}", f[p][i]))
                .collect();
            println!("{name:>10} {label:>5} t=0,25,50,75,100: {}", v.join(" "));
        }
    }

    let mut profile = std::collections::BTreeMap::new();
    profile.insert("sex".to_string(), 1.0);
    profile.insert("speed".to_string(), 13.0);
    let knee = &model.predict_mean(&profile, &grid)?[1];
    let (peak, at) = knee
        .iter()
        .enumerate()
        .fold((f64::MIN, 0), |b, (i, &v)| if v > b.0 { (v, i) } else { b });
    println!(
        "predicted peak knee angle for sex=1, speed 13: {peak:.1} at t={}",
        grid[at]
    );
    Ok(())
}
