//! Pointwise and simultaneous confidence bands for effect functions, the
//! bootstrap of subjects, ICC percentile intervals and Monte Carlo errors.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FunctionalDataset;
use crate::error::{Error, Result};
use crate::lmm::{MultiStats, RemlOptions};
use crate::model::{fit_scores, model_frame, FittedModel, ScoreEstimates};
use crate::numeric::{ceiling_quantile, ceiling_rank, normal_quantile, sorted_symmetric_eigen};
use crate::rng::{stream, tag, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandKind {
    PointwiseWald,
    PointwiseBoot,
    Simultaneous,
}

impl BandKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BandKind::PointwiseWald => "pointwise_wald",
            BandKind::PointwiseBoot => "pointwise_boot",
            BandKind::Simultaneous => "simultaneous",
        }
    }
}

/// A band `point ± multiplier · se` for one effect, per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub effect: usize,
    pub kind: BandKind,
    pub level: f64,
    pub multiplier: f64,
    pub grid: Vec<f64>,
    pub point: Vec<DVector<f64>>,
    pub se: Vec<DVector<f64>>,
    pub lower: Vec<DVector<f64>>,
    pub upper: Vec<DVector<f64>>,
    /// Grid points left out of the max statistic because their SE was ~0.
    pub excluded_points: usize,
    /// Some variance had to be clamped at zero.
    pub clamped: bool,
}

impl Band {
    fn build(
        effect: usize,
        kind: BandKind,
        level: f64,
        multiplier: f64,
        grid: &[f64],
        point: Vec<DVector<f64>>,
        se: Vec<DVector<f64>>,
    ) -> Self {
        let lower = point
            .iter()
            .zip(&se)
            .map(|(p, s)| p.zip_map(s, |p, s| p - multiplier * s))
            .collect();
        let upper = point
            .iter()
            .zip(&se)
            .map(|(p, s)| p.zip_map(s, |p, s| p + multiplier * s))
            .collect();
        Self {
            effect,
            kind,
            level,
            multiplier,
            grid: grid.to_vec(),
            point,
            se,
            lower,
            upper,
            excluded_points: 0,
            clamped: false,
        }
    }

    /// Whether `truth` lies inside the band at each grid point, per dimension.
    pub fn covers(&self, truth: &[DVector<f64>]) -> Vec<Vec<bool>> {
        truth
            .iter()
            .enumerate()
            .map(|(p, t)| {
                (0..t.len())
                    .map(|i| self.lower[p][i] <= t[i] && t[i] <= self.upper[p][i])
                    .collect()
            })
            .collect()
    }
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    Ok(())
}

fn check_effect(model: &FittedModel, a: usize) -> Result<()> {
    if a >= model.effect_count() {
        return Err(Error::Config(format!(
            "effect index {a} out of range (model has {} effects)",
            model.effect_count()
        )));
    }
    Ok(())
}

/// Pointwise standard errors `sqrt(ψ(t)ᵀ Σ ψ(t))` per dimension.
fn pointwise_se(psi: &[DMatrix<f64>], cov: &DMatrix<f64>) -> (Vec<DVector<f64>>, bool) {
    let mut clamped = false;
    let se = psi
        .iter()
        .map(|m| {
            let mc = m * cov;
            DVector::from_iterator(
                m.nrows(),
                (0..m.nrows()).map(|i| {
                    let v = mc.row(i).dot(&m.row(i));
                    if v < 0.0 {
                        clamped = true;
                        0.0
                    } else {
                        v.sqrt()
                    }
                }),
            )
        })
        .collect();
    (se, clamped)
}

/// Wald pointwise band from the model-based diagonal variances.
pub fn wald_pointwise(model: &FittedModel, a: usize, grid: &[f64], level: f64) -> Result<Band> {
    check_effect(model, a)?;
    let diag = model.wald_var.row(a).transpose();
    let clamped_var = diag.iter().any(|&v| v < 0.0);
    let cov = DMatrix::from_diagonal(&diag.map(|v| v.max(0.0)));
    let mut band = pointwise_band(model, a, grid, &cov, level, BandKind::PointwiseWald)?;
    band.clamped |= clamped_var;
    Ok(band)
}

/// Pointwise band `β̂_a(t) ± z_{1-α/2} se(t)` from any coefficient covariance.
pub fn pointwise_band(
    model: &FittedModel,
    a: usize,
    grid: &[f64],
    cov: &DMatrix<f64>,
    level: f64,
    kind: BandKind,
) -> Result<Band> {
    check_effect(model, a)?;
    check_level(level)?;
    let psi = model.basis.eval_functions(grid)?;
    let point = model.effect_function(a, grid)?;
    let (se, clamped) = pointwise_se(&psi, cov);
    let mut band = Band::build(
        a,
        kind,
        level,
        normal_quantile(0.5 + level / 2.0),
        grid,
        point,
        se,
    );
    band.clamped = clamped;
    Ok(band)
}

/// Square-root factor `L` with `L Lᵀ = Σ`, negative eigenvalues floored at zero.
pub fn covariance_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (values, vectors) = sorted_symmetric_eigen(cov);
    let max = values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-8 * max {
        return Err(Error::Covariance(format!(
            "coefficient covariance is not positive semi-definite (eigenvalues {min:.3e} .. {max:.3e})"
        )));
    }
    let mut l = vectors;
    for (k, mut col) in l.column_iter_mut().enumerate() {
        col *= values[k].max(0.0).sqrt();
    }
    Ok(l)
}

/// Options for simultaneous bands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandOptions {
    pub draws: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BandOptions {
    fn default() -> Self {
        Self {
            draws: 10_000,
            level: 0.95,
            seed: 1,
        }
    }
}

const DRAW_CHUNK: usize = 500;

/// Max statistics `max_{t,p} |ψ_p(t)ᵀ δ_r| / se_p(t)` for Gaussian `δ_r ~ N(0, Σ)`.
///
/// Points whose SE is below `1e-12 · max se` are skipped; their count is returned.
pub fn max_statistics(
    psi: &[DMatrix<f64>],
    se: &[DVector<f64>],
    cov: &DMatrix<f64>,
    draws: usize,
    seed: u64,
    stream_path: &[u64],
) -> Result<(Vec<f64>, usize)> {
    let k = cov.nrows();
    let factor = covariance_factor(cov)?;
    let max_se = se
        .iter()
        .flat_map(|s| s.iter())
        .cloned()
        .fold(0.0, f64::max);
    let threshold = 1e-12 * max_se;
    let inv_se: Vec<DVector<f64>> = se
        .iter()
        .map(|s| {
            s.map(|v| {
                if v > threshold && v > 0.0 {
                    1.0 / v
                } else {
                    0.0
                }
            })
        })
        .collect();
    let excluded = inv_se
        .iter()
        .flat_map(|s| s.iter())
        .filter(|&&v| v == 0.0)
        .count();
    // project draws straight onto the grid: Ψ_p L maps N(0, I) to curve deviations
    let maps: Vec<DMatrix<f64>> = psi.iter().map(|m| m * &factor).collect();
    let chunks = draws.div_ceil(DRAW_CHUNK);
    let per_chunk: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut path = stream_path.to_vec();
            path.push(c as u64);
            let mut rng: StreamRng = stream(seed, &path);
            let len = DRAW_CHUNK.min(draws - c * DRAW_CHUNK);
            let z = DMatrix::from_fn(k, len, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut best = vec![0.0f64; len];
            for (map, inv) in maps.iter().zip(&inv_se) {
                let dev = map * &z;
                for (r, b) in best.iter_mut().enumerate() {
                    for (i, &w) in inv.iter().enumerate() {
                        let v = dev[(i, r)].abs() * w;
                        if v > *b {
                            *b = v;
                        }
                    }
                }
            }
            best
        })
        .collect();
    Ok((per_chunk.concat(), excluded))
}

/// Simultaneous band (Gaussian max-statistic over all grid points and dimensions).
pub fn simultaneous_band(
    model: &FittedModel,
    a: usize,
    grid: &[f64],
    cov: &DMatrix<f64>,
    options: BandOptions,
) -> Result<Band> {
    check_effect(model, a)?;
    check_level(options.level)?;
    if options.draws == 0 {
        return Err(Error::Config(
            "simultaneous band needs at least one draw".into(),
        ));
    }
    let k = model.basis.k();
    if cov.shape() != (k, k) {
        return Err(Error::Shape(format!(
            "covariance is {:?}, expected {k}x{k}",
            cov.shape()
        )));
    }
    let psi = model.basis.eval_functions(grid)?;
    let point = model.effect_function(a, grid)?;
    let (se, clamped) = pointwise_se(&psi, cov);
    let (stats, excluded) = max_statistics(
        &psi,
        &se,
        cov,
        options.draws,
        options.seed,
        &[tag::BAND_DRAWS, a as u64],
    )?;
    let multiplier = ceiling_quantile(&stats, options.level);
    let mut band = Band::build(
        a,
        BandKind::Simultaneous,
        options.level,
        multiplier,
        grid,
        point,
        se,
    );
    band.excluded_points = excluded;
    band.clamped = clamped;
    Ok(band)
}

/// Draw `n` indices uniformly with replacement.
pub fn resample_subjects(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    Subjects,
    /// Every replicate reuses the original sample (for testing).
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub seed: u64,
    pub reml: RemlOptions,
    pub resampling: Resampling,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            replicates: 1000,
            seed: 1,
            reml: RemlOptions::default(),
            resampling: Resampling::Subjects,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Successful replicates.
    pub replicates: usize,
    pub seed: u64,
    /// Per effect, one row of score coefficients per successful replicate.
    pub beta: Vec<DMatrix<f64>>,
    /// Per effect, empirical covariance of the replicate coefficients.
    pub cov: Vec<DMatrix<f64>>,
    pub icc_samples: Vec<f64>,
    pub failures: usize,
}

/// Bootstrap of subjects on the fitted basis.
///
/// Each draw is a fresh pseudo-subject carrying all of the original subject's
/// observations and covariates; scores come from the fixed mv-FPC basis, so
/// only the score models are refitted. Replicate `r` uses stream `(seed, r)`.
pub fn bootstrap_of_subjects(
    data: &FunctionalDataset,
    model: &FittedModel,
    options: BootstrapOptions,
) -> Result<BootstrapResult> {
    if options.replicates < 2 {
        return Err(Error::Config(format!(
            "bootstrap needs at least 2 replicates, got {}",
            options.replicates
        )));
    }
    let frame = model_frame(data, &model.terms, &model.basis)?;
    let n = frame.subjects.len();
    let outcomes: Vec<Option<ScoreEstimates>> = (0..options.replicates)
        .into_par_iter()
        .map(|r| {
            let draws = match options.resampling {
                Resampling::Subjects => {
                    let mut rng = stream(options.seed, &[tag::BOOTSTRAP, r as u64]);
                    resample_subjects(n, &mut rng)
                }
                Resampling::Identity => (0..n).collect(),
            };
            let stats = MultiStats::from_groups(draws.iter().map(|&i| &frame.summaries[i])).ok()?;
            let fits = fit_scores(&stats, options.reml).ok()?;
            let est = ScoreEstimates::from_fits(&fits);
            est.icc().ok()?;
            Some(est)
        })
        .collect();
    let ok: Vec<&ScoreEstimates> = outcomes.iter().flatten().collect();
    let failures = options.replicates - ok.len();
    if ok.len() < 2 {
        return Err(Error::Inference(format!(
            "only {} of {} bootstrap replicates succeeded",
            ok.len(),
            options.replicates
        )));
    }
    let b = ok.len();
    let p = model.effect_count();
    let k = model.basis.k();
    let beta: Vec<DMatrix<f64>> = (0..p)
        .map(|a| DMatrix::from_fn(b, k, |r, j| ok[r].bstar[(a, j)]))
        .collect();
    let cov = beta.iter().map(empirical_covariance).collect();
    let icc_samples = ok.iter().map(|e| e.icc().unwrap_or(f64::NAN)).collect();
    Ok(BootstrapResult {
        replicates: b,
        seed: options.seed,
        beta,
        cov,
        icc_samples,
        failures,
    })
}

/// Sample covariance of the rows of `x` (divisor `n - 1`).
pub fn empirical_covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mean = x.row_mean();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    let cov = c.transpose() * &c / (n as f64 - 1.0);
    (&cov + cov.transpose()) * 0.5
}

/// Percentile interval from order statistics `⌈Bα/2⌉` and `⌈B(1-α/2)⌉`.
pub fn icc_interval(samples: &[f64], level: f64) -> Result<(f64, f64)> {
    check_level(level)?;
    if samples.is_empty() {
        return Err(Error::Inference("no ICC samples".into()));
    }
    let alpha = 1.0 - level;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let b = sorted.len();
    Ok((
        sorted[ceiling_rank(b, alpha / 2.0) - 1],
        sorted[ceiling_rank(b, 1.0 - alpha / 2.0) - 1],
    ))
}

/// Monte Carlo standard error of an estimated proportion.
pub fn mc_se(p: f64, n_sim: usize) -> f64 {
    (p * (1.0 - p) / n_sim as f64).max(0.0).sqrt()
}
