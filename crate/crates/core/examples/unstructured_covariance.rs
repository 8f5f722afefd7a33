//! Compare the model's diagonal covariance reconstruction with the
//! method-of-moments estimate under both simulation scenarios.

use mvfmm::model::{fit_model, FitOptions};
use mvfmm::sim::{Generator, Scenario, ScenarioConfig};
use mvfmm::unstructured::{cov_ise, unstructured_fit, Which};

fn main() -> mvfmm::Result<()> {
    for scenario in [Scenario::SharedBasis, Scenario::FourierLegendre] {
        let generator = Generator::new(ScenarioConfig::scenario(scenario))?;
        let sim = generator.generate(0)?;
        let model = fit_model(&sim.data, &Generator::model_spec(), FitOptions::default())?;
        let unstr = unstructured_fit(&model, &sim.data)?;
        let grid = &generator.grid;
        for (which, model_surface) in [
            (Which::Q, model.reconstruct_q(grid)?),
            (Which::S, model.reconstruct_s(grid)?),
        ] {
            let truth = generator.true_surface(which);
            let ise_model = cov_ise(&model_surface, &truth)?;
            let ise_unstr = cov_ise(&unstr.surface(which, grid)?, &truth)?;
            println!(
                "scenario {} {}: ISE model {:>12.0}  unstructured {:>12.0}  ratio {:.2}",
                scenario.number(),
                which.as_str(),
                ise_model,
                ise_unstr,
                ise_model / ise_unstr
            );
        }
    }
    Ok(())
}
