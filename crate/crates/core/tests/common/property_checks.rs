//! Randomised invariants across modules as strategy/check pairs, plus
//! determinism under different thread counts.

use std::collections::BTreeMap;

use mvfmm::basis::{fit_coefficients, gram_matrix, BasisSystem};
use mvfmm::dataset::{
    CoefficientSet, CovariateTable, DimensionLayout, FunctionalDataset, ObsKey, Side,
};
use mvfmm::export::{csv_bytes, BandRow, BAND_HEADER};
use mvfmm::inference::{
    bootstrap_of_subjects, icc_interval, pointwise_band, simultaneous_band, BandKind, BandOptions,
    BootstrapOptions,
};
use mvfmm::ingest::{landmark_register, time_normalize, RawCurve};
use mvfmm::lmm::{reml_fit, LmmDesign, RemlOptions};
use mvfmm::model::{fit_model, FitOptions, FittedModel, ModelSpec};
use mvfmm::mvfpca::{mvfpca_fit, FpcaOptions};
use mvfmm::numeric::{linspace, min_eigenvalue, percent_grid};
use mvfmm::sim::{run_study, Scenario, ScenarioConfig};
use mvfmm::unstructured::unstructured_solve;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = std::result::Result<(), TestCaseError>;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random bilateral dataset on a Fourier layout with `sex` and `speed`.
fn random_dataset(n_subjects: usize, k: usize, seed: u64) -> FunctionalDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout: Vec<DimensionLayout> = ["hip", "knee"]
        .iter()
        .map(|l| DimensionLayout {
            label: l.to_string(),
            basis: BasisSystem::fourier(k, 100.0).unwrap(),
        })
        .collect();
    let m = 2 * k;
    let scale: Vec<f64> = (0..m).map(|j| 3.0 / (1.0 + j as f64)).collect();
    let mut keys = Vec::new();
    let mut coefs = DMatrix::zeros(2 * n_subjects, m);
    let mut covs = CovariateTable::new(vec!["sex".into(), "speed".into()]);
    for i in 0..n_subjects {
        let subject = format!("p{i:03}");
        let sex = if i % 3 == 0 { 1.0 } else { 0.0 };
        let speed = 11.0 + 1.5 * normal(&mut rng);
        covs.insert(&subject, None, vec![sex, speed]).unwrap();
        let u: Vec<f64> = (0..m).map(|j| scale[j] * normal(&mut rng)).collect();
        for (r, side) in [Side::Left, Side::Right].into_iter().enumerate() {
            for j in 0..m {
                coefs[(2 * i + r, j)] = j as f64
                    + sex * 0.3
                    + (speed - 11.0) * 0.2 * (j % 3) as f64
                    + u[j]
                    + 0.5 * scale[j] * normal(&mut rng);
            }
            keys.push(ObsKey {
                subject: subject.clone(),
                side,
                stride: 0,
            });
        }
    }
    FunctionalDataset::new(CoefficientSet::new(layout, keys, coefs).unwrap(), covs).unwrap()
}

fn spec() -> ModelSpec {
    ModelSpec::default()
        .categorical("sex", 0)
        .continuous("speed")
}

fn random_design(seed: u64, groups: usize) -> LmmDesign {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = Vec::new();
    let mut x = Vec::new();
    let mut g = Vec::new();
    for i in 0..groups {
        let size = 1 + (i % 3);
        let u = 1.5 * normal(&mut rng);
        let z: f64 = rng.random_range(-2.0..2.0);
        for _ in 0..size {
            y.push(3.0 - z + u + normal(&mut rng));
            x.extend([1.0, z]);
            g.push(i);
        }
    }
    let n = y.len();
    LmmDesign::new(DVector::from_vec(y), DMatrix::from_row_slice(n, 2, &x), g).unwrap()
}

/// Run a property with a fixed-seed runner; the error names the failing input.
pub fn run_property<S: Strategy>(
    cases: u32,
    strategy: S,
    check: impl Fn(S::Value) -> Check,
) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    let mut runner = TestRunner::new_with_rng(
        Config {
            failure_persistence: None,
            ..Config::with_cases(cases)
        },
        proptest::test_runner::TestRng::deterministic_rng(
            proptest::test_runner::RngAlgorithm::ChaCha,
        ),
    );
    runner.run(&strategy, check).map_err(|e| e.to_string())
}

pub fn bsplines_reproduce_cubic_polynomials_inputs() -> impl Strategy<Value = (usize, [f64; 4])> {
    (4usize..40, proptest::array::uniform4(-5.0f64..5.0))
}

pub fn bsplines_reproduce_cubic_polynomials((size, c): (usize, [f64; 4])) -> Check {
    let basis = BasisSystem::bspline(size, 4, 100.0).unwrap();
    let grid = percent_grid();
    let poly = |t: f64| {
        let u = t / 100.0;
        c[0] + c[1] * u + c[2] * u * u + c[3] * u * u * u
    };
    let values: Vec<f64> = grid.iter().map(|&t| poly(t)).collect();
    let coefs = fit_coefficients(&values, &grid, &basis).unwrap();
    let fine = linspace(0.0, 100.0, 333);
    let fitted = basis.eval(&fine).unwrap() * coefs;
    for (i, &t) in fine.iter().enumerate() {
        prop_assert!((fitted[i] - poly(t)).abs() < 1e-10);
    }
    Ok(())
}

pub fn gram_matrices_are_symmetric_psd_inputs() -> impl Strategy<Value = (usize, usize)> {
    (1usize..14, 0usize..3)
}

pub fn gram_matrices_are_symmetric_psd((size, kind): (usize, usize)) -> Check {
    let basis = match kind {
        0 => BasisSystem::bspline(size + 3, 4, 100.0).unwrap(),
        1 => BasisSystem::fourier(size, 100.0).unwrap(),
        _ => BasisSystem::legendre(size.min(8), 100.0).unwrap(),
    };
    let g = gram_matrix(&basis, 1001).unwrap();
    prop_assert!((&g - g.transpose()).abs().max() == 0.0);
    prop_assert!(min_eigenvalue(&g) >= -1e-10);
    Ok(())
}

pub fn normalisation_is_idempotent_and_warps_are_shared_inputs(
) -> impl Strategy<Value = (f64, Vec<f64>, f64, f64)> {
    (
        -50.0f64..50.0,
        proptest::collection::vec(0.01f64..2.0, 20..60),
        0.2f64..0.8,
        30.0f64..70.0,
    )
}

pub fn normalisation_is_idempotent_and_warps_are_shared(
    (start, steps, peak_frac, target): (f64, Vec<f64>, f64, f64),
) -> Check {
    let mut times = vec![start];
    for s in &steps {
        let last = *times.last().unwrap();
        times.push(last + s);
    }
    let n = times.len();
    let peak = (peak_frac * (n - 1) as f64).round() as usize;
    let make = |dim: &str, f: &dyn Fn(usize) -> f64| RawCurve {
        subject: "a".into(),
        side: Side::Right,
        dimension: dim.into(),
        stride: 0,
        times: times.clone(),
        values: (0..n).map(f).collect(),
    };
    let knee = make("knee", &|i| -((i as f64 - peak as f64).powi(2)));
    let hip = make("hip", &|i| (i as f64 * 0.3).sin());
    let once = time_normalize(&knee, 100.0).unwrap();
    let twice = time_normalize(&once, 100.0).unwrap();
    prop_assert_eq!(&once.times, &twice.times);
    prop_assert_eq!(once.times[0], 0.0);
    prop_assert_eq!(*once.times.last().unwrap(), 100.0);
    // identical curves in both dimensions must stay identical after the shared warp
    let hip_n = time_normalize(&hip, 100.0).unwrap();
    let copy = RawCurve {
        dimension: "copy".into(),
        ..hip_n.clone()
    };
    let reg = landmark_register(&[once, hip_n, copy], "knee", target).unwrap();
    prop_assert_eq!(&reg[1].values, &reg[2].values);
    Ok(())
}

pub fn mvfpca_invariants_inputs() -> impl Strategy<Value = (usize, usize, u64)> {
    (3usize..15, 2usize..6, 0u64..1000)
}

pub fn mvfpca_invariants((n_subjects, k, seed): (usize, usize, u64)) -> Check {
    let data = random_dataset(n_subjects, k, seed);
    let basis = mvfpca_fit(
        &data.coefficients,
        FpcaOptions {
            pve_target: 1.0,
            k_max: None,
        },
    )
    .unwrap();
    prop_assert!(basis.orthonormality_error() < 1e-8);
    let scores = basis.project(&data.coefficients.coefs, true).unwrap();
    let n = scores.nrows() as f64;
    for a in 0..basis.k() {
        let col = scores.column(a);
        let mean = col.mean();
        prop_assert!(mean.abs() < 1e-8 * basis.eigenvalues[0].sqrt());
        let var = col.map(|v| (v - mean).powi(2)).sum() / (n - 1.0);
        prop_assert!((var - basis.eigenvalues[a]).abs() < 1e-8 * basis.eigenvalues[0]);
        for b in 0..a {
            let cov = col.dot(&scores.column(b)) / (n - 1.0);
            let corr = cov / (basis.eigenvalues[a] * basis.eigenvalues[b]).sqrt();
            if basis.eigenvalues[a] > 1e-8 * basis.eigenvalues[0] {
                prop_assert!(corr.abs() < 1e-6, "corr {} between {} and {}", corr, a, b);
            }
        }
        // sign convention: largest |entry| positive
        let row = basis.eigencoefs.row(a);
        let lead = row
            .iter()
            .cloned()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        prop_assert!(lead > 0.0);
    }
    Ok(())
}

pub fn reml_shift_and_scale_invariance_inputs() -> impl Strategy<Value = (u64, f64, f64)> {
    (0u64..500, -100.0f64..100.0, 0.01f64..100.0)
}

pub fn reml_shift_and_scale_invariance((seed, shift, sigma): (u64, f64, f64)) -> Check {
    let d = random_design(seed, 25);
    let fit = reml_fit(&d, RemlOptions::default()).unwrap();
    let shifted =
        LmmDesign::new(d.response.add_scalar(shift), d.x.clone(), d.groups.clone()).unwrap();
    let fs = reml_fit(&shifted, RemlOptions::default()).unwrap();
    prop_assert!((fs.beta[0] - fit.beta[0] - shift).abs() < 1e-8 * shift.abs().max(1.0));
    prop_assert!((fs.beta[1] - fit.beta[1]).abs() < 1e-8);
    prop_assert!((fs.q - fit.q).abs() < 1e-8 * fit.q.max(1.0));
    prop_assert!((fs.s - fit.s).abs() < 1e-8 * fit.s);
    let scaled = LmmDesign::new(&d.response * sigma, d.x.clone(), d.groups.clone()).unwrap();
    let fk = reml_fit(&scaled, RemlOptions::default()).unwrap();
    prop_assert!((fk.lambda - fit.lambda).abs() <= 1e-8 * fit.lambda.max(1e-12));
    prop_assert!((fk.s - sigma * sigma * fit.s).abs() < 1e-8 * sigma * sigma * fit.s);
    prop_assert!(
        (fk.beta[1] - sigma * fit.beta[1]).abs() < 1e-8 * sigma * fit.beta[1].abs().max(1.0)
    );
    prop_assert!((&fit.beta_cov - fit.beta_cov.transpose()).abs().max() == 0.0);
    prop_assert!(min_eigenvalue(&fit.beta_cov) >= -1e-10);
    Ok(())
}

pub fn model_prediction_is_affine_and_icc_bounded_inputs() -> impl Strategy<Value = (u64, f64, f64)>
{
    (0u64..1000, 5.0f64..15.0, 5.0f64..15.0)
}

pub fn model_prediction_is_affine_and_icc_bounded((seed, s1, s2): (u64, f64, f64)) -> Check {
    let data = random_dataset(20, 4, seed);
    let model = fit_model(&data, &spec(), FitOptions::default()).unwrap();
    prop_assert!((0.0..=1.0).contains(&model.icc));
    let grid = percent_grid();
    let at = |speed: f64| {
        let mut c = BTreeMap::new();
        c.insert("speed".to_string(), speed);
        c.insert("sex".to_string(), 1.0);
        model.predict_mean(&c, &grid).unwrap()
    };
    let (a, b, mid) = (at(s1), at(s2), at(0.5 * (s1 + s2)));
    for p in 0..2 {
        for i in 0..grid.len() {
            let lin = 0.5 * (a[p][i] + b[p][i]);
            prop_assert!((mid[p][i] - lin).abs() < 1e-9 * lin.abs().max(1.0));
        }
    }
    // covariance surfaces
    for surface in [
        model.reconstruct_q(&grid).unwrap(),
        model.reconstruct_s(&grid).unwrap(),
    ] {
        prop_assert!(surface.symmetry_error() < 1e-10);
        prop_assert!(surface.is_psd(1e-10));
    }
    Ok(())
}

pub fn band_arithmetic_and_percentiles_inputs() -> impl Strategy<Value = (u64, f64, f64, f64)> {
    (0u64..1000, 0.5f64..0.99, 0.1f64..10.0, -5.0f64..5.0)
}

pub fn band_arithmetic_and_percentiles((seed, level, slope, shift): (u64, f64, f64, f64)) -> Check {
    let data = random_dataset(12, 3, seed);
    let model = fit_model(&data, &spec(), FitOptions::default()).unwrap();
    let k = model.basis.k();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(k, k, |_, _| normal(&mut rng));
    let cov = &a * a.transpose();
    let grid = percent_grid();
    let band = pointwise_band(&model, 1, &grid, &cov, level, BandKind::PointwiseBoot).unwrap();
    for p in 0..2 {
        for i in 0..grid.len() {
            let up = band.upper[p][i] - band.point[p][i];
            let down = band.point[p][i] - band.lower[p][i];
            let want = band.multiplier * band.se[p][i];
            prop_assert!((up - want).abs() <= 1e-12 * band.point[p][i].abs().max(want));
            prop_assert!((down - want).abs() <= 1e-12 * band.point[p][i].abs().max(want));
        }
    }
    let samples: Vec<f64> = (0..97).map(|_| normal(&mut rng)).collect();
    let mapped: Vec<f64> = samples.iter().map(|v| slope * v + shift).collect();
    let (lo, hi) = icc_interval(&samples, level).unwrap();
    let (mlo, mhi) = icc_interval(&mapped, level).unwrap();
    prop_assert_eq!(mlo, slope * lo + shift);
    prop_assert_eq!(mhi, slope * hi + shift);
    Ok(())
}

pub fn unstructured_is_symmetric_and_permutation_invariant_inputs() -> impl Strategy<Value = (u64,)>
{
    (0u64..1000,)
}

pub fn unstructured_is_symmetric_and_permutation_invariant((seed,): (u64,)) -> Check {
    let data = random_dataset(9, 3, seed);
    let theta = &data.coefficients.coefs;
    let (_, groups) = data.subject_index();
    let (q, s) = unstructured_solve(theta, &groups).unwrap();
    prop_assert!((&q - q.transpose()).abs().max() == 0.0);
    prop_assert!((&s - s.transpose()).abs().max() == 0.0);
    // reverse subject order
    let n = theta.nrows();
    let perm: Vec<usize> = (0..n).rev().collect();
    let theta2 = DMatrix::from_fn(n, theta.ncols(), |i, j| theta[(perm[i], j)]);
    let max_g = groups.iter().max().unwrap();
    let groups2: Vec<usize> = perm.iter().map(|&i| max_g - groups[i]).collect();
    let (q2, s2) = unstructured_solve(&theta2, &groups2).unwrap();
    let scale = q.abs().max().max(s.abs().max());
    prop_assert!((&q - q2).abs().max() < 1e-10 * scale);
    prop_assert!((&s - s2).abs().max() < 1e-10 * scale);
    Ok(())
}

pub fn fitted_models_survive_json_inputs() -> impl Strategy<Value = (u64,)> {
    (0u64..1000,)
}

pub fn fitted_models_survive_json((seed,): (u64,)) -> Check {
    let data = random_dataset(10, 3, seed);
    let model = fit_model(&data, &spec(), FitOptions::default()).unwrap();
    let text = serde_json::to_string(&model).unwrap();
    let back: FittedModel = serde_json::from_str(&text).unwrap();
    prop_assert_eq!(&back, &model);
    Ok(())
}

pub fn band_rows_survive_csv_inputs() -> impl Strategy<Value = (Vec<f64>,)> {
    (proptest::collection::vec(-1e6f64..1e6, 1..40),)
}

pub fn band_rows_survive_csv((values,): (Vec<f64>,)) -> Check {
    let rows: Vec<BandRow> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| BandRow {
            effect: format!("e{}", i % 3),
            kind: "simultaneous".into(),
            level: 0.95,
            multiplier: v.abs() / 7.0,
            dimension: "knee".into(),
            t: i as f64 / 3.0,
            point: v,
            se: v.abs().sqrt(),
            lower: v - 1.0 / 3.0,
            upper: v + 1e-300,
        })
        .collect();
    let bytes = csv_bytes(&BAND_HEADER, &rows).unwrap();
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let back: Vec<BandRow> = reader.deserialize().collect::<Result<_, _>>().unwrap();
    prop_assert_eq!(back, rows);
    Ok(())
}

pub fn scenario_configs_survive_json_inputs() -> impl Strategy<Value = (usize, u64, f64, bool)> {
    (2usize..500, any::<u64>(), 0.01f64..0.99, any::<bool>())
}

pub fn scenario_configs_survive_json((n, seed, p, two): (usize, u64, f64, bool)) -> Check {
    let sc = if two {
        Scenario::FourierLegendre
    } else {
        Scenario::SharedBasis
    };
    let cfg = ScenarioConfig {
        n_subjects: n,
        seed,
        sex_probability: p,
        ..ScenarioConfig::scenario(sc)
    };
    let text = serde_json::to_string(&cfg).unwrap();
    let back: ScenarioConfig = serde_json::from_str(&text).unwrap();
    prop_assert_eq!(back, cfg);
    Ok(())
}

pub fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

pub fn bootstrap_is_bit_identical_across_thread_counts() {
    let data = random_dataset(30, 4, 77);
    let model = fit_model(&data, &spec(), FitOptions::default()).unwrap();
    let opts = BootstrapOptions {
        replicates: 60,
        seed: 9,
        ..Default::default()
    };
    let one = in_pool(1, || bootstrap_of_subjects(&data, &model, opts).unwrap());
    let four = in_pool(4, || bootstrap_of_subjects(&data, &model, opts).unwrap());
    assert_eq!(one, four);
    let grid = percent_grid();
    let band = |t| {
        in_pool(t, || {
            simultaneous_band(
                &model,
                2,
                &grid,
                &one.cov[2],
                BandOptions {
                    draws: 1700,
                    level: 0.95,
                    seed: 2,
                },
            )
            .unwrap()
        })
    };
    assert_eq!(band(1), band(3));
}

pub fn studies_are_bit_identical_across_thread_counts() {
    let cfg = ScenarioConfig {
        n_subjects: 40,
        ..ScenarioConfig::scenario(Scenario::FourierLegendre)
    };
    let inference = Some(mvfmm::sim::InferenceConfig {
        bootstrap: 20,
        draws: 200,
        level: 0.9,
    });
    let one = in_pool(1, || run_study(&cfg, 3, inference).unwrap());
    let three = in_pool(3, || run_study(&cfg, 3, inference).unwrap());
    assert_eq!(
        serde_json::to_string(&one).unwrap(),
        serde_json::to_string(&three).unwrap()
    );
}

pub fn tiny_dataset_fit_is_bit_identical_across_thread_counts() {
    let data = super::tiny_dataset();
    let a = in_pool(1, || {
        fit_model(&data, &spec(), FitOptions::default()).unwrap()
    });
    let b = in_pool(4, || {
        fit_model(&data, &spec(), FitOptions::default()).unwrap()
    });
    assert_eq!(a, b);
}

pub const PROPERTIES: [&str; 11] = [
    "bsplines_reproduce_cubic_polynomials",
    "gram_matrices_are_symmetric_psd",
    "normalisation_is_idempotent_and_warps_are_shared",
    "mvfpca_invariants",
    "reml_shift_and_scale_invariance",
    "model_prediction_is_affine_and_icc_bounded",
    "band_arithmetic_and_percentiles",
    "unstructured_is_symmetric_and_permutation_invariant",
    "fitted_models_survive_json",
    "band_rows_survive_csv",
    "scenario_configs_survive_json",
];

pub const DETERMINISM: [(&str, fn()); 3] = [
    (
        "bootstrap_is_bit_identical_across_thread_counts",
        bootstrap_is_bit_identical_across_thread_counts,
    ),
    (
        "studies_are_bit_identical_across_thread_counts",
        studies_are_bit_identical_across_thread_counts,
    ),
    (
        "tiny_dataset_fit_is_bit_identical_across_thread_counts",
        tiny_dataset_fit_is_bit_identical_across_thread_counts,
    ),
];

/// Run one property from [`PROPERTIES`] by name.
pub fn run_named(name: &str) -> Result<(), String> {
    match name {
        "bsplines_reproduce_cubic_polynomials" => run_property(
            48,
            bsplines_reproduce_cubic_polynomials_inputs(),
            bsplines_reproduce_cubic_polynomials,
        ),
        "gram_matrices_are_symmetric_psd" => run_property(
            48,
            gram_matrices_are_symmetric_psd_inputs(),
            gram_matrices_are_symmetric_psd,
        ),
        "normalisation_is_idempotent_and_warps_are_shared" => run_property(
            48,
            normalisation_is_idempotent_and_warps_are_shared_inputs(),
            normalisation_is_idempotent_and_warps_are_shared,
        ),
        "mvfpca_invariants" => run_property(48, mvfpca_invariants_inputs(), mvfpca_invariants),
        "reml_shift_and_scale_invariance" => run_property(
            48,
            reml_shift_and_scale_invariance_inputs(),
            reml_shift_and_scale_invariance,
        ),
        "model_prediction_is_affine_and_icc_bounded" => run_property(
            24,
            model_prediction_is_affine_and_icc_bounded_inputs(),
            model_prediction_is_affine_and_icc_bounded,
        ),
        "band_arithmetic_and_percentiles" => run_property(
            24,
            band_arithmetic_and_percentiles_inputs(),
            band_arithmetic_and_percentiles,
        ),
        "unstructured_is_symmetric_and_permutation_invariant" => run_property(
            24,
            unstructured_is_symmetric_and_permutation_invariant_inputs(),
            unstructured_is_symmetric_and_permutation_invariant,
        ),
        "fitted_models_survive_json" => run_property(
            24,
            fitted_models_survive_json_inputs(),
            fitted_models_survive_json,
        ),
        "band_rows_survive_csv" => {
            run_property(24, band_rows_survive_csv_inputs(), band_rows_survive_csv)
        }
        "scenario_configs_survive_json" => run_property(
            24,
            scenario_configs_survive_json_inputs(),
            scenario_configs_survive_json,
        ),
        other => Err(format!("unknown property '{other}'")),
    }
}
