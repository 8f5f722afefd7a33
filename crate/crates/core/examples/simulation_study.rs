//! A small coverage study for one scenario, written as report tables.
//!
//! cargo run --release --example simulation_study -- [OUT_DIR] [REPS]

use std::path::PathBuf;

use mvfmm::sim::{run_study, write_report, InferenceConfig, Method, Scenario, ScenarioConfig};

fn main() -> mvfmm::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map(String::as_str).unwrap_or("study"));
    let reps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let cfg = ScenarioConfig::scenario(Scenario::SharedBasis);
    let inference = InferenceConfig {
        bootstrap: 100,
        draws: 1000,
        level: 0.95,
    };
    let study = run_study(&cfg, reps, Some(inference))?;
    let summary = study.summary();
    println!(
        "{} of {} replicates succeeded",
        summary.succeeded, summary.requested
    );
    println!(
        "ICC mean {:.4} (truth {:.4})",
        summary.icc_mean, summary.true_icc
    );
    for method in Method::ALL {
        for a in 0..3 {
            let Some(pw) = study.pointwise_coverage(method, a) else {
                continue;
            };
            println!(
                "{:>9} beta{a}: pointwise coverage {:.3} (MC SE {:.3})",
                method.as_str(),
                pw.estimate,
                pw.mc_se
            );
        }
    }
    std::fs::create_dir_all(&out).map_err(|e| mvfmm::Error::Io {
        path: out.display().to_string(),
        source: e,
    })?;
    for path in write_report(&[study], &out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
