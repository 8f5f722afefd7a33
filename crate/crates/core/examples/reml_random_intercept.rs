//! REML for a scalar random-intercept model, compared with the balanced
//! one-way ANOVA estimator it must agree with when that is positive.

use mvfmm::lmm::{reml_fit, LmmDesign, RemlOptions};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> mvfmm::Result<()> {
    let (groups, per_group) = (40, 3);
    let (q, s): (f64, f64) = (4.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let u = Normal::new(0.0, q.sqrt()).unwrap();
    let e = Normal::new(0.0, s.sqrt()).unwrap();
    let mut y = Vec::new();
    let mut g = Vec::new();
    for i in 0..groups {
        let ui = u.sample(&mut rng);
        for _ in 0..per_group {
            y.push(10.0 + ui + e.sample(&mut rng));
            g.push(i);
        }
    }
    let n = y.len();
    let design = LmmDesign::new(
        DVector::from_vec(y.clone()),
        DMatrix::from_element(n, 1, 1.0),
        g,
    )?;
    let fit = reml_fit(&design, RemlOptions::default())?;
    println!(
        "REML: intercept {:.3} (se {:.3}), q {:.3}, s {:.3}",
        fit.beta[0],
        fit.beta_cov[(0, 0)].sqrt(),
        fit.q,
        fit.s
    );

    let grand = y.iter().sum::<f64>() / n as f64;
    let means: Vec<f64> = y
        .chunks(per_group)
        .map(|c| c.iter().sum::<f64>() / per_group as f64)
        .collect();
    let msb = per_group as f64 * means.iter().map(|m| (m - grand).powi(2)).sum::<f64>()
        / (groups - 1) as f64;
    let msw = y
        .chunks(per_group)
        .zip(&means)
        .map(|(c, m)| c.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        .sum::<f64>()
        / (n - groups) as f64;
    println!(
        "ANOVA: q {:.3}, s {:.3}",
        (msb - msw) / per_group as f64,
        msw
    );
    Ok(())
}
