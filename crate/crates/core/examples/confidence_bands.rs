//! Wald and bootstrap bands for the speed effect on a simulated dataset.

use mvfmm::inference::{
    bootstrap_of_subjects, icc_interval, pointwise_band, simultaneous_band, wald_pointwise,
    BandKind, BandOptions, BootstrapOptions,
};
use mvfmm::model::{fit_model, FitOptions};
use mvfmm::sim::{Generator, Scenario, ScenarioConfig};

fn main() -> mvfmm::Result<()> {
    let generator = Generator::new(ScenarioConfig {
        n_subjects: 120,
        ..ScenarioConfig::scenario(Scenario::SharedBasis)
    })?;
    let sim = generator.generate(0)?;
    let model = fit_model(&sim.data, &Generator::model_spec(), FitOptions::default())?;
    let grid = &generator.grid;
    let a = 2;
    let truth = generator.true_effect(a);

    let boot = bootstrap_of_subjects(
        &sim.data,
        &model,
        BootstrapOptions {
            replicates: 300,
            seed: 5,
            ..Default::default()
        },
    )?;
    let wald_cov = nalgebra::DMatrix::from_diagonal(&model.wald_var.row(a).transpose());
    let options = BandOptions {
        draws: 5000,
        level: 0.95,
        seed: 5,
    };
    let bands = [
        wald_pointwise(&model, a, grid, 0.95)?,
        simultaneous_band(&model, a, grid, &wald_cov, options)?,
        pointwise_band(&model, a, grid, &boot.cov[a], 0.95, BandKind::PointwiseBoot)?,
        simultaneous_band(&model, a, grid, &boot.cov[a], options)?,
    ];
    let names = [
        "Wald pointwise",
        "Wald simultaneous",
        "bootstrap pointwise",
        "bootstrap simultaneous",
    ];
    for (band, name) in bands.iter().zip(names) {
        let covered: usize = band.covers(&truth).iter().flatten().filter(|&&c| c).count();
        let width: f64 =
            band.se.iter().flat_map(|s| s.iter()).sum::<f64>() * 2.0 * band.multiplier / 202.0;
        println!("{name:>23}: multiplier {:.3}, mean width {width:.3}, covers truth at {covered}/202 points", band.multiplier);
    }
    let (lo, hi) = icc_interval(&boot.icc_samples, 0.95)?;
    println!(
        "ICC {:.3}, bootstrap 95% interval [{lo:.3}, {hi:.3}], truth {:.3}",
        model.icc,
        generator.config.true_icc()
    );
    Ok(())
}
