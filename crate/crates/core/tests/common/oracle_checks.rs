//! Production algorithms checked against slow, direct constructions.

use mvfmm::basis::BasisSystem;
use mvfmm::dataset::{
    CoefficientSet, CovariateTable, DimensionLayout, FunctionalDataset, ObsKey, Side,
};
use mvfmm::inference::{
    icc_interval, max_statistics, simultaneous_band, wald_pointwise, BandOptions,
};
use mvfmm::lmm::{fitted_blups, profile_loglik, reml_fit, LmmDesign, RemlOptions};
use mvfmm::model::{fit_model, fit_model_with_basis, FitOptions, ModelSpec};
use mvfmm::mvfpca::{mvfpca_fit, FpcaOptions, MvFpcBasis};
use mvfmm::numeric::{
    ceiling_quantile, linspace, normal_quantile, percent_grid, sorted_symmetric_eigen,
    trapezoid_weights,
};
use mvfmm::rng::tag;
use mvfmm::unstructured::unstructured_solve;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

/// Curves of every observation on a dense grid, dimensions side by side.
fn dense_curves(data: &FunctionalDataset, grid: &[f64]) -> DMatrix<f64> {
    let n = data.len();
    let g = grid.len();
    let layout = data.layout();
    let mut x = DMatrix::zeros(n, layout.len() * g);
    let mut off = 0;
    for (p, d) in layout.iter().enumerate() {
        let phi = d.basis.eval(grid).unwrap();
        let vals = data.coefficients.coefs.columns(off, d.size()) * phi.transpose();
        x.view_mut((0, p * g), (n, g)).copy_from(&vals);
        off += d.size();
    }
    x
}

pub fn mvfpca_matches_dense_grid_pca() {
    let data = super::tiny_dataset();
    let basis = mvfpca_fit(
        &data.coefficients,
        FpcaOptions {
            pve_target: 1.0,
            k_max: None,
        },
    )
    .unwrap();
    // trapezoid on 4001 points: its own quadrature error is ~4e-7 relative
    let grid = linspace(0.0, 100.0, 4001);
    let w = trapezoid_weights(&grid);
    let g = grid.len();
    let n = data.len();
    let mut x = dense_curves(&data, &grid);
    let mean = x.row_mean();
    for mut r in x.row_iter_mut() {
        r -= &mean;
    }
    let ww: Vec<f64> = w.iter().chain(w.iter()).copied().collect();
    let xw = DMatrix::from_fn(n, 2 * g, |i, j| x[(i, j)] * ww[j]);
    // the n x n dual problem has the same non-zero spectrum
    let dual = &xw * x.transpose() / (n as f64 - 1.0);
    let (values, vectors) = sorted_symmetric_eigen(&dual);
    for k in 0..basis.k() {
        let rel = ((values[k] - basis.eigenvalues[k]) / basis.eigenvalues[k]).abs();
        assert!(
            rel < 1e-6,
            "eigenvalue {k}: {} vs {} ({rel:.2e})",
            values[k],
            basis.eigenvalues[k]
        );
    }
    // leading eigenfunctions: dual vectors mapped back to the grid
    let psi = basis.eval_functions(&grid).unwrap();
    for k in 0..4 {
        let f = x.transpose() * vectors.column(k) / ((n as f64 - 1.0) * values[k]).sqrt();
        let mut dot = 0.0;
        let mut err_plus: f64 = 0.0;
        let mut err_minus: f64 = 0.0;
        for p in 0..2 {
            for i in 0..g {
                let a = f[p * g + i];
                let b = psi[p][(i, k)];
                dot += ww[i] * a * b;
                err_plus = err_plus.max((a - b).abs());
                err_minus = err_minus.max((a + b).abs());
            }
        }
        assert!(
            (dot.abs() - 1.0).abs() < 1e-5,
            "component {k}: inner product {dot}"
        );
        assert!(
            err_plus.min(err_minus) < 1e-4,
            "component {k}: sup error {}",
            err_plus.min(err_minus)
        );
    }
}

fn one_way(groups: usize, size: usize, q: f64, s: f64, seed: u64) -> LmmDesign {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Normal::new(0.0, q.sqrt()).unwrap();
    let e = Normal::new(0.0, s.sqrt()).unwrap();
    let mut y = Vec::new();
    let mut g = Vec::new();
    for i in 0..groups {
        let ui = u.sample(&mut rng);
        for _ in 0..size {
            y.push(2.0 + ui + e.sample(&mut rng));
            g.push(i);
        }
    }
    let n = y.len();
    LmmDesign::new(DVector::from_vec(y), DMatrix::from_element(n, 1, 1.0), g).unwrap()
}

pub fn reml_equals_balanced_anova_estimators() {
    for seed in 0..5 {
        let (groups, size) = (50, 2);
        let d = one_way(groups, size, 4.0, 1.0, seed);
        let fit = reml_fit(&d, RemlOptions::default()).unwrap();
        let y = d.response.as_slice();
        let n = y.len();
        let grand = y.iter().sum::<f64>() / n as f64;
        let means: Vec<f64> = y
            .chunks(size)
            .map(|c| c.iter().sum::<f64>() / size as f64)
            .collect();
        let msb = size as f64 * means.iter().map(|m| (m - grand).powi(2)).sum::<f64>()
            / (groups - 1) as f64;
        let msw = y
            .chunks(size)
            .zip(&means)
            .map(|(c, m)| c.iter().map(|v| (v - m).powi(2)).sum::<f64>())
            .sum::<f64>()
            / (n - groups) as f64;
        let q_anova = (msb - msw) / size as f64;
        assert!(q_anova > 0.0);
        assert!(
            (fit.q - q_anova).abs() < 1e-6 * q_anova,
            "seed {seed}: q {} vs {q_anova}",
            fit.q
        );
        assert!(
            (fit.s - msw).abs() < 1e-6 * msw,
            "seed {seed}: s {} vs {msw}",
            fit.s
        );
        assert!((fit.beta[0] - grand).abs() < 1e-9);
    }
}

/// Unbalanced design with two covariates and group sizes 1..=4.
fn unbalanced(seed: u64, q: f64) -> LmmDesign {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = Vec::new();
    let mut x = Vec::new();
    let mut g = Vec::new();
    for i in 0..30 {
        let size = 1 + i % 4;
        let ui = q.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let z: f64 = rng.random_range(-1.0..1.0);
        for _ in 0..size {
            let w: f64 = rng.sample(StandardNormal);
            y.push(1.0 + 0.5 * z - w + ui + rng.sample::<f64, _>(StandardNormal));
            x.extend([1.0, z, w]);
            g.push(i);
        }
    }
    let n = y.len();
    LmmDesign::new(DVector::from_vec(y), DMatrix::from_row_slice(n, 3, &x), g).unwrap()
}

pub fn reml_optimum_beats_a_1000_point_audit_grid() {
    for (seed, q) in [(1, 2.0), (2, 0.3), (3, 0.0), (4, 8.0)] {
        let d = unbalanced(seed, q);
        let opts = RemlOptions::default();
        let fit = reml_fit(&d, opts).unwrap();
        let best = profile_loglik(&d, fit.lambda).unwrap();
        let top = (1.0 + opts.lambda_max).ln();
        for i in 0..1000 {
            let lambda = (top * i as f64 / 999.0).exp() - 1.0;
            let v = profile_loglik(&d, lambda).unwrap();
            assert!(
                best >= v - 1e-6 * v.abs().max(1.0),
                "seed {seed}: λ={lambda} gives {v} > {best}"
            );
        }
    }
}

/// `-½[log|V| + (n-p) log(rᵀV⁻¹r) + log|XᵀV⁻¹X|]` from dense `n x n` matrices.
fn dense_reml(d: &LmmDesign, lambda: f64) -> f64 {
    let n = d.response.len();
    let p = d.x.ncols();
    let v = DMatrix::from_fn(n, n, |i, j| {
        (if i == j { 1.0 } else { 0.0 })
            + if d.groups[i] == d.groups[j] {
                lambda
            } else {
                0.0
            }
    });
    let vinv = v.clone().try_inverse().unwrap();
    let xtv = d.x.transpose() * &vinv;
    let a = &xtv * &d.x;
    let beta = a.clone().try_inverse().unwrap() * &xtv * &d.response;
    let r = &d.response - &d.x * beta;
    let rss = (r.transpose() * &vinv * &r)[(0, 0)];
    -0.5 * (v.determinant().ln() + (n - p) as f64 * rss.ln() + a.determinant().ln())
}

pub fn reml_criterion_matches_dense_matrices_up_to_a_constant() {
    let d = unbalanced(9, 1.5);
    let offset = profile_loglik(&d, 0.0).unwrap() - dense_reml(&d, 0.0);
    for lambda in [0.01, 0.3, 1.0, 4.0, 50.0] {
        let diff = profile_loglik(&d, lambda).unwrap() - dense_reml(&d, lambda);
        assert!(
            (diff - offset).abs() < 1e-8,
            "λ={lambda}: offset {diff} vs {offset}"
        );
    }
}

pub fn blups_match_mixed_model_equations() {
    let d = unbalanced(5, 2.0);
    let fit = reml_fit(&d, RemlOptions::default()).unwrap();
    assert!(fit.lambda > 0.0);
    let n = d.response.len();
    let p = d.x.ncols();
    let g = d.n_groups();
    let z = DMatrix::from_fn(n, g, |i, j| if d.groups[i] == j { 1.0 } else { 0.0 });
    let mut lhs = DMatrix::zeros(p + g, p + g);
    lhs.view_mut((0, 0), (p, p))
        .copy_from(&(d.x.transpose() * &d.x));
    lhs.view_mut((0, p), (p, g))
        .copy_from(&(d.x.transpose() * &z));
    lhs.view_mut((p, 0), (g, p))
        .copy_from(&(z.transpose() * &d.x));
    lhs.view_mut((p, p), (g, g))
        .copy_from(&(z.transpose() * &z + DMatrix::identity(g, g) / fit.lambda));
    let mut rhs = DVector::zeros(p + g);
    rhs.rows_mut(0, p)
        .copy_from(&(d.x.transpose() * &d.response));
    rhs.rows_mut(p, g).copy_from(&(z.transpose() * &d.response));
    let sol = lhs.lu().solve(&rhs).unwrap();
    for j in 0..p {
        assert!((sol[j] - fit.beta[j]).abs() < 1e-10, "beta {j}");
    }
    for (i, b) in fitted_blups(&fit, &d).iter().enumerate() {
        assert!(
            (sol[p + i] - b).abs() < 1e-10,
            "group {i}: {} vs {b}",
            sol[p + i]
        );
    }
}

/// Per cell, least squares of every product `θ_r[m] θ_r'[m']` on the
/// same-subject and same-observation indicators, with all (2N)² pairs listed.
fn dense_moment_ols(theta: &DMatrix<f64>, groups: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = theta.shape();
    let rows = n * n;
    let mut z = DMatrix::zeros(rows, 2);
    for r in 0..n {
        for r2 in 0..n {
            z[(r * n + r2, 0)] = if groups[r] == groups[r2] { 1.0 } else { 0.0 };
            z[(r * n + r2, 1)] = if r == r2 { 1.0 } else { 0.0 };
        }
    }
    let mut y = DMatrix::zeros(rows, m * m);
    for r in 0..n {
        for r2 in 0..n {
            for a in 0..m {
                for b in 0..m {
                    y[(r * n + r2, a * m + b)] = theta[(r, a)] * theta[(r2, b)];
                }
            }
        }
    }
    let coef = (z.transpose() * &z).try_inverse().unwrap() * z.transpose() * y;
    let q = DMatrix::from_fn(m, m, |a, b| coef[(0, a * m + b)]);
    let s = DMatrix::from_fn(m, m, |a, b| coef[(1, a * m + b)]);
    (q, s)
}

pub fn unstructured_solver_equals_dense_design_on_small_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut cases = 0;
    for n_obs in 2..=12 {
        for m in 1..=4 {
            for _ in 0..3 {
                // random group sizes in 1..=3, at least one repeated subject
                let mut groups = Vec::new();
                let mut g = 0;
                while groups.len() < n_obs {
                    let size = rng.random_range(1..=3usize).min(n_obs - groups.len());
                    groups.extend(std::iter::repeat_n(g, size));
                    g += 1;
                }
                if (0..g).all(|k| groups.iter().filter(|&&x| x == k).count() == 1) {
                    continue;
                }
                let theta = DMatrix::from_fn(n_obs, m, |_, _| rng.sample::<f64, _>(StandardNormal));
                let (q, s) = unstructured_solve(&theta, &groups).unwrap();
                let (qd, sd) = dense_moment_ols(&theta, &groups);
                let scale = theta.abs().max().powi(2).max(1.0);
                let qd = (&qd + qd.transpose()) * 0.5;
                let sd = (&sd + sd.transpose()) * 0.5;
                assert!((&q - &qd).abs().max() < 1e-10 * scale, "Q, n={n_obs} m={m}");
                assert!((&s - &sd).abs().max() < 1e-10 * scale, "S, n={n_obs} m={m}");
                cases += 1;
            }
        }
    }
    assert!(cases > 100);
}

pub fn identity_basis_reproduces_pointwise_mixed_models() {
    // order-1 splines are interval indicators; at interval midpoints the FPCs
    // are coordinate functions and each score model is a per-point LMM
    let points = 6;
    let end = 6.0;
    let h = end / points as f64;
    let basis = BasisSystem::bspline(points, 1, end).unwrap();
    let layout: Vec<DimensionLayout> = ["hip", "knee"]
        .iter()
        .map(|l| DimensionLayout {
            label: l.to_string(),
            basis: basis.clone(),
        })
        .collect();
    let m = 2 * points;
    let n_subjects = 25;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut keys = Vec::new();
    let mut coefs = DMatrix::zeros(2 * n_subjects, m);
    let mut covs = CovariateTable::new(vec!["speed".into()]);
    for i in 0..n_subjects {
        let subject = format!("s{i:02}");
        let speed: f64 = rng.random_range(9.0..13.0);
        covs.insert(&subject, None, vec![speed]).unwrap();
        let u: Vec<f64> = (0..m)
            .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for (j, side) in [Side::Left, Side::Right].into_iter().enumerate() {
            for c in 0..m {
                coefs[(2 * i + j, c)] =
                    c as f64 + 0.5 * c as f64 * speed + u[c] + rng.sample::<f64, _>(StandardNormal);
            }
            keys.push(ObsKey {
                subject: subject.clone(),
                side,
                stride: 0,
            });
        }
    }
    let data = FunctionalDataset::new(
        CoefficientSet::new(layout.clone(), keys, coefs.clone()).unwrap(),
        covs,
    )
    .unwrap();
    let gram = DMatrix::identity(m, m) * h;
    let mean = coefs.row_mean().transpose();
    let fpc = MvFpcBasis::from_parts(
        layout,
        gram,
        mean,
        DVector::from_element(m, 1.0),
        DMatrix::identity(m, m) / h.sqrt(),
    )
    .unwrap();
    let spec = ModelSpec::default().continuous("speed");
    let model = fit_model_with_basis(&data, &spec, fpc, RemlOptions::default()).unwrap();
    let mids: Vec<f64> = (0..points).map(|i| (i as f64 + 0.5) * h).collect();
    let speed_mean = (0..n_subjects)
        .map(|i| {
            data.covariates
                .value(&format!("s{i:02}"), Side::Left, "speed")
                .unwrap()
        })
        .sum::<f64>()
        / n_subjects as f64;
    let x = DMatrix::from_fn(2 * n_subjects, 2, |r, c| {
        if c == 0 {
            1.0
        } else {
            data.covariates
                .value(&format!("s{:02}", r / 2), Side::Left, "speed")
                .unwrap()
                - speed_mean
        }
    });
    let groups: Vec<usize> = (0..2 * n_subjects).map(|r| r / 2).collect();
    for a in 0..2 {
        let f = model.effect_function(a, &mids).unwrap();
        for c in 0..m {
            let d =
                LmmDesign::new(coefs.column(c).into_owned(), x.clone(), groups.clone()).unwrap();
            let fit = reml_fit(&d, RemlOptions::default()).unwrap();
            let got = f[c / points][c % points];
            assert!(
                (got - fit.beta[a]).abs() < 1e-8 * fit.beta[a].abs().max(1.0),
                "effect {a} point {c}: {got} vs {}",
                fit.beta[a]
            );
        }
    }
}

pub fn band_arithmetic_is_exact() {
    let data = super::tiny_dataset();
    let spec = ModelSpec::default()
        .categorical("sex", 0)
        .continuous("speed");
    let model = fit_model(&data, &spec, FitOptions::default()).unwrap();
    let grid = percent_grid();
    let z = normal_quantile(0.975);
    for a in 0..model.effect_count() {
        let band = wald_pointwise(&model, a, &grid, 0.95).unwrap();
        assert_eq!(band.multiplier, z);
        for p in 0..2 {
            for i in 0..grid.len() {
                assert_eq!(band.lower[p][i], band.point[p][i] - z * band.se[p][i]);
                assert_eq!(band.upper[p][i], band.point[p][i] + z * band.se[p][i]);
            }
        }
        let cov = DMatrix::from_diagonal(&model.wald_var.row(a).transpose());
        let opts = BandOptions {
            draws: 777,
            level: 0.9,
            seed: 3,
        };
        let sim = simultaneous_band(&model, a, &grid, &cov, opts).unwrap();
        let psi = model.basis.eval_functions(&grid).unwrap();
        let (stats, _) =
            max_statistics(&psi, &band.se, &cov, 777, 3, &[tag::BAND_DRAWS, a as u64]).unwrap();
        let mut sorted = stats.clone();
        sorted.sort_by(f64::total_cmp);
        // ⌈777 · 0.9⌉ = 700
        assert_eq!(sim.multiplier, sorted[699]);
        assert_eq!(sim.multiplier, ceiling_quantile(&stats, 0.9));
        assert_eq!(sim.se, band.se);
    }
}

pub fn quantile_order_statistics_are_exact() {
    let samples: Vec<f64> = (1..=200).rev().map(|i| i as f64 / 200.0).collect();
    assert_eq!(ceiling_quantile(&samples, 0.95), 0.95);
    assert_eq!(ceiling_quantile(&samples, 0.025), 0.025);
    assert_eq!(ceiling_quantile(&samples, 1.0), 1.0);
    assert_eq!(ceiling_quantile(&samples, 1e-9), 0.005);
    assert_eq!(icc_interval(&samples, 0.95).unwrap(), (0.025, 0.975));
    let ten: Vec<f64> = (0..10).map(f64::from).collect();
    // ⌈10 · 0.05⌉ = 1 and ⌈10 · 0.95⌉ = 10
    assert_eq!(icc_interval(&ten, 0.9).unwrap(), (0.0, 9.0));
}
