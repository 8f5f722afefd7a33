//! Represent a noisy sampled curve in a cubic B-spline basis and check the
//! quadrature Gram matrix of an orthonormal Fourier system.

use mvfmm::basis::{fit_coefficients, gram_matrix, BasisSystem};
use mvfmm::numeric::percent_grid;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> mvfmm::Result<()> {
    let grid = percent_grid();
    let truth: Vec<f64> = grid
        .iter()
        .map(|t| {
            30.0 * (2.0 * std::f64::consts::PI * t / 100.0).sin()
                + 10.0 * (-(t - 70.0) * (t - 70.0) / 60.0).exp()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let observed: Vec<f64> = truth.iter().map(|v| v + noise.sample(&mut rng)).collect();

    for size in [10, 20, 40, 80] {
        let basis = BasisSystem::bspline(size, 4, 100.0)?;
        let coefs = fit_coefficients(&observed, &grid, &basis)?;
        let fitted = basis.eval(&grid)? * coefs;
        let rms_truth = (fitted
            .iter()
            .zip(&truth)
            .map(|(f, t)| (f - t).powi(2))
            .sum::<f64>()
            / grid.len() as f64)
            .sqrt();
        let rms_data = (fitted
            .iter()
            .zip(&observed)
            .map(|(f, t)| (f - t).powi(2))
            .sum::<f64>()
            / grid.len() as f64)
            .sqrt();
        println!("K={size:3}: RMS to data {rms_data:.3}, RMS to truth {rms_truth:.3}");
    }

    let fourier = BasisSystem::fourier(9, 100.0)?;
    let gram = gram_matrix(&fourier, 1001)?;
    let dev = (gram - DMatrix::identity(9, 9)).abs().max();
    println!("Fourier(9) Gram deviation from identity: {dev:.2e}");
    Ok(())
}
