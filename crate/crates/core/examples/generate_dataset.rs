//! Draw one synthetic dataset and write it in the long CSV input format.
//!
//! cargo run --release --example generate_dataset -- OUT_DIR [N_SUBJECTS] [SCENARIO] [SEED]

use std::path::PathBuf;

use mvfmm::sim::{Generator, Scenario, ScenarioConfig};

fn main() -> mvfmm::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map(String::as_str).unwrap_or("generated"));
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let scenario = match args.get(2).map(String::as_str) {
        Some("2") => Scenario::FourierLegendre,
        _ => Scenario::SharedBasis,
    };
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(7);

    let cfg = ScenarioConfig {
        n_subjects: n,
        seed,
        ..ScenarioConfig::scenario(scenario)
    };
    let generator = Generator::new(cfg)?;
    let sim = generator.generate(0)?;
    std::fs::create_dir_all(&out).map_err(|e| mvfmm::Error::Io {
        path: out.display().to_string(),
        source: e,
    })?;
    generator.write_long_csv(&sim, &out.join("curves.csv"), &out.join("covariates.csv"))?;
    println!(
        "wrote {} subjects x 2 sides x {} dimensions to {}",
        n,
        generator.labels.len(),
        out.display()
    );
    Ok(())
}
