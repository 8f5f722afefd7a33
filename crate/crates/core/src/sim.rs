//! Two-scenario simulation study: surrogate truth, data generators, ISE and
//! coverage metrics, the replication driver and report tables.
//!
//! Scenario 1 draws the fixed effects, the subject effects and the residuals
//! on one shared 13-function generator basis, so the fitted model is correctly
//! specified. Scenario 2 keeps the fixed effects but draws subject effects on a
//! split Fourier basis and residuals on a split Legendre basis, so the
//! estimated FPC basis no longer diagonalises either covariance.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{
    gram_matrix, BasisSystem, LeastSquaresFitter, SplitBasis, GRAM_QUADRATURE_POINTS,
};
use crate::dataset::{
    CoefficientSet, CovariateTable, DimensionLayout, FunctionalDataset, ObsKey, Side,
};
use crate::error::{Error, Result};
use crate::export::write_csv;
use crate::inference::{
    bootstrap_of_subjects, icc_interval, mc_se, pointwise_band, simultaneous_band, wald_pointwise,
    BandKind, BandOptions, BootstrapOptions, Resampling,
};
use crate::lmm::RemlOptions;
use crate::model::{fit_model_with_basis, CovarianceSurface, ModelSpec};
use crate::mvfpca::{layout_gram, mvfpca_fit_prepared, FpcaOptions, PreparedMetric};
use crate::numeric::{
    block_diagonal, linspace, percent_grid, simpson_weights, sorted_symmetric_eigen,
    trapezoid_weights,
};
use crate::rng::{derive_seed, stream, tag};
use crate::unstructured::{cov_ise, unstructured_fit, Which};

pub const COMPONENTS: usize = 13;
pub const EFFECTS: usize = 3;
pub const DIMENSIONS: [&str; 2] = ["hip", "knee"];
pub const DOMAIN_END: f64 = 100.0;
pub const DATA_BASIS_SIZE: usize = 80;
pub const SURROGATE_ICC: f64 = 0.78;
pub const SURROGATE_TOTAL_Q: f64 = 5000.0;
const Q_DECAY: f64 = 0.55;
const S_DECAY: f64 = 0.65;
const COARSE_SIZE: usize = 14;
const KERNEL_GRID_POINTS: usize = 201;

pub const REDUCED_REPS: usize = 200;
pub const FULL_REPS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Scenario {
    /// Everything on the shared generator basis.
    SharedBasis,
    /// Fourier subject effects, Legendre residuals.
    FourierLegendre,
}

impl Scenario {
    pub fn number(&self) -> u8 {
        match self {
            Scenario::SharedBasis => 1,
            Scenario::FourierLegendre => 2,
        }
    }
}

impl TryFrom<u8> for Scenario {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Scenario::SharedBasis),
            2 => Ok(Scenario::FourierLegendre),
            _ => Err(format!("scenario must be 1 or 2, got {v}")),
        }
    }
}

impl From<Scenario> for u8 {
    fn from(s: Scenario) -> u8 {
        s.number()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub scenario: Scenario,
    pub n_subjects: usize,
    pub seed: u64,
    pub sex_probability: f64,
    pub speed_mean: f64,
    pub speed_sd: f64,
    pub q_true: Vec<f64>,
    pub s_true: Vec<f64>,
    /// Fixed-effect coefficients on the generator basis (3 rows of 13); the
    /// surrogate shapes are used when absent.
    pub bstar_true: Option<Vec<Vec<f64>>>,
    pub pve_target: f64,
    /// Per-dimension signs applied to the scenario-2 subject-effect and
    /// residual systems (each piece may be flipped without losing
    /// orthonormality).
    pub u_signs: Vec<f64>,
    pub e_signs: Vec<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let (q, s) = surrogate_variances();
        Self {
            schema_version: 1,
            scenario: Scenario::SharedBasis,
            n_subjects: 280,
            seed: 1,
            sex_probability: 0.39,
            speed_mean: 11.0,
            speed_sd: 1.6,
            q_true: q,
            s_true: s,
            bstar_true: None,
            pve_target: 0.9999,
            u_signs: vec![1.0, 1.0],
            e_signs: vec![1.0, -1.0],
        }
    }
}

impl ScenarioConfig {
    pub fn scenario(scenario: Scenario) -> Self {
        Self {
            scenario,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != 1 {
            return Err(Error::Config(format!(
                "unsupported schema version {}",
                self.schema_version
            )));
        }
        if self.n_subjects < 3 {
            return Err(Error::Config(format!(
                "need at least 3 subjects, got {}",
                self.n_subjects
            )));
        }
        for (name, v) in [("q_true", &self.q_true), ("s_true", &self.s_true)] {
            if v.len() != COMPONENTS {
                return Err(Error::Config(format!(
                    "{name} needs {COMPONENTS} entries, got {}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::Config(format!(
                    "{name} entries must be finite and non-negative"
                )));
            }
        }
        if !(self.sex_probability > 0.0 && self.sex_probability < 1.0) {
            return Err(Error::Config("sex_probability must lie in (0, 1)".into()));
        }
        if !(self.speed_sd > 0.0 && self.speed_mean.is_finite()) {
            return Err(Error::Config(
                "speed_sd must be positive and speed_mean finite".into(),
            ));
        }
        if !(self.pve_target > 0.0 && self.pve_target <= 1.0) {
            return Err(Error::Config("pve_target must lie in (0, 1]".into()));
        }
        for (name, v) in [("u_signs", &self.u_signs), ("e_signs", &self.e_signs)] {
            if v.len() != DIMENSIONS.len() || v.iter().any(|x| x.abs() != 1.0) {
                return Err(Error::Config(format!(
                    "{name} needs {} entries of +1 or -1",
                    DIMENSIONS.len()
                )));
            }
        }
        if let Some(b) = &self.bstar_true {
            if b.len() != EFFECTS
                || b.iter()
                    .any(|r| r.len() != COMPONENTS || r.iter().any(|x| !x.is_finite()))
            {
                return Err(Error::Config(format!(
                    "bstar_true must be {EFFECTS} rows of {COMPONENTS} finite values"
                )));
            }
        }
        Ok(())
    }

    /// `Σq / (Σq + Σs)` of the generator.
    pub fn true_icc(&self) -> f64 {
        let q: f64 = self.q_true.iter().sum();
        let s: f64 = self.s_true.iter().sum();
        if q + s > 0.0 {
            q / (q + s)
        } else {
            0.0
        }
    }
}

fn geometric(total: f64, ratio: f64) -> Vec<f64> {
    let first = total * (1.0 - ratio) / (1.0 - ratio.powi(COMPONENTS as i32));
    (0..COMPONENTS)
        .map(|k| first * ratio.powi(k as i32))
        .collect()
}

/// Geometrically decaying `q` and `s` with `Σq = 5000` and ICC 0.78.
pub fn surrogate_variances() -> (Vec<f64>, Vec<f64>) {
    let total_s = SURROGATE_TOTAL_Q * (1.0 - SURROGATE_ICC) / SURROGATE_ICC;
    (
        geometric(SURROGATE_TOTAL_Q, Q_DECAY),
        geometric(total_s, S_DECAY),
    )
}

fn bump(t: f64, centre: f64, width: f64) -> f64 {
    (-(t - centre).powi(2) / (2.0 * width * width)).exp()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Target shapes (degrees) for intercept, sex and speed per km/h.
pub fn target_effect(a: usize, p: usize, t: f64) -> f64 {
    match (a, p) {
        (0, 0) => 32.0 - 40.0 * bump(t, 45.0, 15.0) + 6.0 * sigmoid((t - 85.0) / 4.0),
        (0, _) => 12.0 + 30.0 * bump(t, 20.0, 7.0) + 85.0 * bump(t, 70.0, 13.0),
        (1, 0) => 1.25 * bump(t, 30.0, 12.0) - sigmoid((t - 60.0) / 6.0),
        (1, _) => -1.5 * bump(t, 70.0, 10.0),
        (_, 0) => 0.6 * bump(t, 85.0, 10.0) - 0.4 * bump(t, 40.0, 15.0),
        (_, _) => bump(t, 72.0, 12.0) + 0.5 * bump(t, 18.0, 6.0),
    }
}

fn surrogate_kernel(p: usize, t: f64, p2: usize, t2: f64) -> f64 {
    let amp = |p: usize, t: f64| {
        if p == 0 {
            1.0 + 0.3 * (2.0 * std::f64::consts::PI * t / DOMAIN_END).sin()
        } else {
            1.0 + 0.6 * bump(t, 70.0, 15.0)
        }
    };
    let long = [[1.0, 0.6], [0.6, 1.0]];
    let short = [[0.4, -0.15], [-0.15, 0.6]];
    let d2 = (t - t2).powi(2);
    let k = long[p][p2] * (-d2 / (2.0 * 18.0 * 18.0)).exp()
        + short[p][p2] * (-d2 / (2.0 * 6.0 * 6.0)).exp();
    amp(p, t) * amp(p2, t2) * k
}

/// Leading eigenfunctions of a smooth bivariate kernel on a coarse cubic
/// B-spline space (11 intervals, nested in the 77-interval data space).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorBasis {
    pub coarse: BasisSystem,
    /// One row of stacked coarse coefficients per function (13 x 28).
    pub coefs: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

impl GeneratorBasis {
    pub fn surrogate() -> Result<Self> {
        let coarse = BasisSystem::bspline(COARSE_SIZE, 4, DOMAIN_END)?;
        let kgrid = linspace(0.0, DOMAIN_END, KERNEL_GRID_POINTS);
        let fitter = LeastSquaresFitter::new(&coarse, &kgrid)?;
        let map = fitter.fit_columns(&DMatrix::identity(KERNEL_GRID_POINTS, KERNEL_GRID_POINTS))?;
        let c = COARSE_SIZE;
        let mut cov = DMatrix::zeros(2 * c, 2 * c);
        for p in 0..2 {
            for p2 in 0..2 {
                let k = DMatrix::from_fn(KERNEL_GRID_POINTS, KERNEL_GRID_POINTS, |i, j| {
                    surrogate_kernel(p, kgrid[i], p2, kgrid[j])
                });
                cov.view_mut((p * c, p2 * c), (c, c))
                    .copy_from(&(&map * k * map.transpose()));
            }
        }
        let g = gram_matrix(&coarse, GRAM_QUADRATURE_POINTS)?;
        let metric = PreparedMetric::new(&block_diagonal(&[g.clone(), g]))?;
        let op = &metric.sqrt * cov * &metric.sqrt;
        let (values, vectors) = sorted_symmetric_eigen(&((&op + op.transpose()) * 0.5));
        if values[COMPONENTS - 1] <= 1e-10 * values[0] {
            return Err(Error::Simulation(
                "surrogate kernel has fewer than 13 components".into(),
            ));
        }
        let mut coefs = DMatrix::zeros(COMPONENTS, 2 * c);
        for k in 0..COMPONENTS {
            let mut v = &metric.inv_sqrt * vectors.column(k);
            let lead = v.iamax();
            if v[lead] < 0.0 {
                v.neg_mut();
            }
            coefs.set_row(k, &v.transpose());
        }
        Ok(Self {
            coarse,
            coefs,
            eigenvalues: values.iter().take(COMPONENTS).copied().collect(),
        })
    }

    /// Per-dimension `|grid| x 13` function values.
    pub fn eval(&self, grid: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        let phi = self.coarse.eval(grid)?;
        let c = COARSE_SIZE;
        Ok((0..2)
            .map(|p| &phi * self.coefs.columns(p * c, c).transpose())
            .collect())
    }

    /// Coefficients of the target shapes on this basis (3 x 13).
    pub fn project_targets(&self) -> Result<DMatrix<f64>> {
        let n = GRAM_QUADRATURE_POINTS;
        let grid = linspace(0.0, DOMAIN_END, n);
        let w = simpson_weights(n, 0.0, DOMAIN_END)?;
        let psi = self.eval(&grid)?;
        Ok(DMatrix::from_fn(EFFECTS, COMPONENTS, |a, k| {
            (0..2)
                .map(|p| {
                    (0..n)
                        .map(|i| w[i] * target_effect(a, p, grid[i]) * psi[p][(i, k)])
                        .sum::<f64>()
                })
                .sum()
        }))
    }
}

/// One generated dataset with the truth it was drawn from.
#[derive(Debug, Clone)]
pub struct SimDataset {
    pub data: FunctionalDataset,
    /// Curve values per dimension (grid x observation), observation `2i + side`.
    pub curves: Vec<DMatrix<f64>>,
    /// Fixed-effect design rows `[1, sex, centred speed]`.
    pub design: DMatrix<f64>,
    /// Subject-effect coefficients (subjects x 13).
    pub u_coefs: DMatrix<f64>,
    /// Residual coefficients (observations x 13).
    pub e_coefs: DMatrix<f64>,
}

/// Precomputed truth and first-stage machinery shared by every replicate.
pub struct Generator {
    pub config: ScenarioConfig,
    pub grid: Vec<f64>,
    pub labels: Vec<String>,
    pub basis: GeneratorBasis,
    pub bstar: DMatrix<f64>,
    pub fixed_psi: Vec<DMatrix<f64>>,
    pub u_psi: Vec<DMatrix<f64>>,
    pub e_psi: Vec<DMatrix<f64>>,
    pub layout: Vec<DimensionLayout>,
    fitter: LeastSquaresFitter,
    metric: PreparedMetric,
}

impl Generator {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let grid = percent_grid();
        let basis = GeneratorBasis::surrogate()?;
        let bstar = match &config.bstar_true {
            Some(rows) => DMatrix::from_fn(EFFECTS, COMPONENTS, |a, k| rows[a][k]),
            None => basis.project_targets()?,
        };
        let fixed_psi = basis.eval(&grid)?;
        let (u_psi, e_psi) = match config.scenario {
            Scenario::SharedBasis => (fixed_psi.clone(), fixed_psi.clone()),
            Scenario::FourierLegendre => {
                let end = 2.0 * DOMAIN_END;
                let fourier = SplitBasis::new(BasisSystem::fourier(COMPONENTS, end)?, 2)?;
                let legendre = SplitBasis::new(BasisSystem::legendre(COMPONENTS, end)?, 2)?;
                let signed = |mut m: Vec<DMatrix<f64>>, signs: &[f64]| {
                    for (x, s) in m.iter_mut().zip(signs) {
                        *x *= *s;
                    }
                    m
                };
                (
                    signed(fourier.eval(&grid)?, &config.u_signs),
                    signed(legendre.eval(&grid)?, &config.e_signs),
                )
            }
        };
        let data_basis = BasisSystem::bspline(DATA_BASIS_SIZE, 4, DOMAIN_END)?;
        let layout: Vec<DimensionLayout> = DIMENSIONS
            .iter()
            .map(|l| DimensionLayout {
                label: l.to_string(),
                basis: data_basis.clone(),
            })
            .collect();
        let fitter = LeastSquaresFitter::new(&data_basis, &grid)?;
        let metric = PreparedMetric::new(&layout_gram(&layout)?)?;
        Ok(Self {
            config,
            grid,
            labels: DIMENSIONS.iter().map(|s| s.to_string()).collect(),
            basis,
            bstar,
            fixed_psi,
            u_psi,
            e_psi,
            layout,
            fitter,
            metric,
        })
    }

    /// Draw replicate `r`; stream `(seed, [replicate, r, data])`.
    pub fn generate(&self, replicate: usize) -> Result<SimDataset> {
        let cfg = &self.config;
        let n = cfg.n_subjects;
        let mut rng = stream(cfg.seed, &[tag::REPLICATE, replicate as u64, tag::DATA]);
        let q_sd: Vec<f64> = cfg.q_true.iter().map(|v| v.sqrt()).collect();
        let s_sd: Vec<f64> = cfg.s_true.iter().map(|v| v.sqrt()).collect();
        let mut sex = vec![0.0; n];
        let mut speed = vec![0.0; n];
        let mut u_coefs = DMatrix::zeros(n, COMPONENTS);
        let mut e_coefs = DMatrix::zeros(2 * n, COMPONENTS);
        for i in 0..n {
            sex[i] = if rng.random::<f64>() < cfg.sex_probability {
                1.0
            } else {
                0.0
            };
            speed[i] = cfg.speed_mean + cfg.speed_sd * rng.sample::<f64, _>(StandardNormal);
            for k in 0..COMPONENTS {
                u_coefs[(i, k)] = q_sd[k] * rng.sample::<f64, _>(StandardNormal);
            }
            for j in 0..2 {
                for k in 0..COMPONENTS {
                    e_coefs[(2 * i + j, k)] = s_sd[k] * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        let speed_mean = speed.iter().sum::<f64>() / n as f64;
        let design = DMatrix::from_fn(2 * n, EFFECTS, |r, a| match a {
            0 => 1.0,
            1 => sex[r / 2],
            _ => speed[r / 2] - speed_mean,
        });
        // generator-space coefficients per observation, one column each
        let mean_coefs = (&design * &self.bstar).transpose();
        let u_cols = DMatrix::from_fn(COMPONENTS, 2 * n, |k, r| u_coefs[(r / 2, k)]);
        let e_cols = e_coefs.transpose();
        let curves: Vec<DMatrix<f64>> = (0..2)
            .map(|p| match self.config.scenario {
                Scenario::SharedBasis => &self.fixed_psi[p] * (&mean_coefs + &u_cols + &e_cols),
                Scenario::FourierLegendre => {
                    &self.fixed_psi[p] * &mean_coefs
                        + &self.u_psi[p] * &u_cols
                        + &self.e_psi[p] * &e_cols
                }
            })
            .collect();
        let fitted = curves
            .iter()
            .map(|c| self.fitter.fit_columns(c))
            .collect::<Result<Vec<_>>>()?;
        let m = DATA_BASIS_SIZE;
        let coefs = DMatrix::from_fn(2 * n, 2 * m, |r, j| fitted[j / m][(j % m, r)]);
        let keys = (0..2 * n)
            .map(|r| ObsKey {
                subject: subject_id(r / 2),
                side: if r % 2 == 0 { Side::Left } else { Side::Right },
                stride: 0,
            })
            .collect();
        let mut covariates = CovariateTable::new(vec!["sex".into(), "speed".into()]);
        for i in 0..n {
            covariates.insert(&subject_id(i), None, vec![sex[i], speed[i]])?;
        }
        let data = FunctionalDataset::new(
            CoefficientSet::new(self.layout.clone(), keys, coefs)?,
            covariates,
        )?;
        Ok(SimDataset {
            data,
            curves,
            design,
            u_coefs,
            e_coefs,
        })
    }

    /// Write a simulated dataset as the long curves CSV and covariates CSV
    /// that the ingest module reads.
    pub fn write_long_csv(
        &self,
        sim: &SimDataset,
        curves_path: &Path,
        covariates_path: &Path,
    ) -> Result<()> {
        let keys = &sim.data.coefficients.keys;
        let mut rows = Vec::with_capacity(keys.len() * self.labels.len() * self.grid.len());
        for (r, key) in keys.iter().enumerate() {
            for (p, label) in self.labels.iter().enumerate() {
                for (i, &t) in self.grid.iter().enumerate() {
                    rows.push(CurveRow {
                        subject: key.subject.clone(),
                        side: key.side.as_str().to_string(),
                        dimension: label.clone(),
                        stride: 0,
                        t,
                        value: sim.curves[p][(i, r)],
                    });
                }
            }
        }
        write_csv(curves_path, &CURVE_HEADER, &rows)?;
        let subjects: Vec<&str> = keys.iter().step_by(2).map(|k| k.subject.as_str()).collect();
        let covs = subjects
            .iter()
            .map(|s| {
                Ok(CovariateCsvRow {
                    subject: s.to_string(),
                    sex: sim.data.covariates.value(s, Side::Left, "sex")?,
                    speed: sim.data.covariates.value(s, Side::Left, "speed")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_csv(covariates_path, &["subject", "sex", "speed"], &covs)
    }

    /// True effect `a` on the percent grid, per dimension.
    pub fn true_effect(&self, a: usize) -> Vec<DVector<f64>> {
        let row = self.bstar.row(a).transpose();
        self.fixed_psi.iter().map(|psi| psi * &row).collect()
    }

    pub fn true_surface(&self, which: Which) -> CovarianceSurface {
        let (psi, w) = match which {
            Which::Q => (&self.u_psi, &self.config.q_true),
            Which::S => (&self.e_psi, &self.config.s_true),
        };
        CovarianceSurface::from_diagonal(
            &self.grid,
            self.labels.clone(),
            psi,
            &DVector::from_column_slice(w),
        )
    }

    /// Model specification matching the generator's covariates.
    pub fn model_spec() -> ModelSpec {
        ModelSpec::default()
            .categorical("sex", 0)
            .continuous("speed")
    }

    /// Generate, fit and score replicate `r`.
    pub fn run_replicate(
        &self,
        r: usize,
        inference: Option<InferenceConfig>,
    ) -> Result<ReplicateRecord> {
        let sim = self.generate(r)?;
        let data = &sim.data;
        let fpca = FpcaOptions {
            pve_target: self.config.pve_target,
            k_max: None,
        };
        let basis =
            mvfpca_fit_prepared(&self.layout, &data.coefficients.coefs, &self.metric, fpca)?;
        let model = fit_model_with_basis(data, &Self::model_spec(), basis, RemlOptions::default())?;
        let truths: Vec<Vec<DVector<f64>>> = (0..EFFECTS).map(|a| self.true_effect(a)).collect();
        let ise_beta = (0..EFFECTS)
            .map(|a| {
                fixed_effect_ise(
                    &model.effect_function(a, &self.grid)?,
                    &truths[a],
                    &self.grid,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let true_q = self.true_surface(Which::Q);
        let true_s = self.true_surface(Which::S);
        let unstructured = unstructured_fit(&model, data)?;
        let ise_q = [
            cov_ise(&model.reconstruct_q(&self.grid)?, &true_q)?,
            cov_ise(&unstructured.surface(Which::Q, &self.grid)?, &true_q)?,
        ];
        let ise_s = [
            cov_ise(&model.reconstruct_s(&self.grid)?, &true_s)?,
            cov_ise(&unstructured.surface(Which::S, &self.grid)?, &true_s)?,
        ];
        let coverage = match inference {
            None => None,
            Some(inf) => Some(self.coverage(r, data, &model, &truths, inf)?),
        };
        Ok(ReplicateRecord {
            replicate: r,
            k_retained: model.basis.k(),
            ise_beta,
            ise_q,
            ise_s,
            icc: model.icc,
            nonconverged: model.report.nonconverged().len(),
            coverage,
        })
    }

    fn coverage(
        &self,
        r: usize,
        data: &FunctionalDataset,
        model: &crate::model::FittedModel,
        truths: &[Vec<DVector<f64>>],
        inf: InferenceConfig,
    ) -> Result<ReplicateCoverage> {
        let seed = self.config.seed;
        let boot = bootstrap_of_subjects(
            data,
            model,
            BootstrapOptions {
                replicates: inf.bootstrap,
                seed: derive_seed(seed, &[tag::BOOTSTRAP, r as u64]),
                reml: RemlOptions::default(),
                resampling: Resampling::Subjects,
            },
        )?;
        let band_opts = BandOptions {
            draws: inf.draws,
            level: inf.level,
            seed: derive_seed(seed, &[tag::BAND_DRAWS, r as u64]),
        };
        let mut pointwise = vec![Vec::new(), Vec::new()];
        let mut simultaneous = vec![Vec::new(), Vec::new()];
        for (a, truth) in truths.iter().enumerate() {
            let wald_cov =
                DMatrix::from_diagonal(&model.wald_var.row(a).transpose().map(|v| v.max(0.0)));
            let bands = [
                (
                    wald_pointwise(model, a, &self.grid, inf.level)?,
                    simultaneous_band(model, a, &self.grid, &wald_cov, band_opts)?,
                ),
                (
                    pointwise_band(
                        model,
                        a,
                        &self.grid,
                        &boot.cov[a],
                        inf.level,
                        BandKind::PointwiseBoot,
                    )?,
                    simultaneous_band(model, a, &self.grid, &boot.cov[a], band_opts)?,
                ),
            ];
            for (m, (pw, sim)) in bands.iter().enumerate() {
                pointwise[m].push(pw.covers(truth));
                simultaneous[m].push(sim.covers(truth).iter().flatten().all(|&c| c));
            }
        }
        let interval = icc_interval(&boot.icc_samples, inf.level)?;
        let truth = self.config.true_icc();
        Ok(ReplicateCoverage {
            pointwise,
            simultaneous,
            icc_interval: interval,
            icc_covered: interval.0 <= truth && truth <= interval.1,
            boot_failures: boot.failures,
        })
    }
}

pub const CURVE_HEADER: [&str; 6] = ["subject", "side", "dimension", "stride", "t", "value"];

/// One sample of one curve in the long input format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub subject: String,
    pub side: String,
    pub dimension: String,
    pub stride: u32,
    pub t: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CovariateCsvRow {
    subject: String,
    sex: f64,
    speed: f64,
}

fn subject_id(i: usize) -> String {
    format!("s{:04}", i + 1)
}

/// Draw replicate `replicate` of a scenario.
pub fn generate_dataset(config: &ScenarioConfig, replicate: usize) -> Result<SimDataset> {
    Generator::new(config.clone())?.generate(replicate)
}

/// `Σ_p ∫ (estimate - truth)²` by the trapezoid rule.
pub fn fixed_effect_ise(
    estimate: &[DVector<f64>],
    truth: &[DVector<f64>],
    grid: &[f64],
) -> Result<f64> {
    if estimate.len() != truth.len() || estimate.iter().chain(truth).any(|v| v.len() != grid.len())
    {
        return Err(Error::Shape("estimate, truth and grid do not match".into()));
    }
    let w = trapezoid_weights(grid);
    Ok(estimate
        .iter()
        .zip(truth)
        .map(|(e, t)| {
            (0..grid.len())
                .map(|i| w[i] * (e[i] - t[i]).powi(2))
                .sum::<f64>()
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub bootstrap: usize,
    pub draws: usize,
    pub level: f64,
}

impl InferenceConfig {
    pub fn reduced() -> Self {
        Self {
            bootstrap: 200,
            draws: 2000,
            level: 0.95,
        }
    }

    pub fn full() -> Self {
        Self {
            bootstrap: 1000,
            draws: 10_000,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Wald,
    Bootstrap,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Wald, Method::Bootstrap];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Wald => "wald",
            Method::Bootstrap => "bootstrap",
        }
    }

    fn index(&self) -> usize {
        match self {
            Method::Wald => 0,
            Method::Bootstrap => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateCoverage {
    /// `[method][effect][dimension][t]`
    pub pointwise: Vec<Vec<Vec<Vec<bool>>>>,
    /// `[method][effect]`
    pub simultaneous: Vec<Vec<bool>>,
    pub icc_interval: (f64, f64),
    pub icc_covered: bool,
    pub boot_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub k_retained: usize,
    pub ise_beta: Vec<f64>,
    /// `[model, unstructured]`
    pub ise_q: [f64; 2],
    pub ise_s: [f64; 2],
    pub icc: f64,
    pub nonconverged: usize,
    pub coverage: Option<ReplicateCoverage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub estimate: f64,
    pub mc_se: f64,
}

impl Proportion {
    pub fn new(estimate: f64, n: usize) -> Self {
        Self {
            estimate,
            mc_se: mc_se(estimate.clamp(0.0, 1.0), n.max(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub config: ScenarioConfig,
    pub requested: usize,
    pub inference: Option<InferenceConfig>,
    pub true_icc: f64,
    pub grid: Vec<f64>,
    pub labels: Vec<String>,
    /// Successful replicates in replicate order.
    pub records: Vec<ReplicateRecord>,
    /// Failed replicates with their error messages.
    pub failures: Vec<(usize, String)>,
}

/// Run `n_reps` replicates in parallel; each replicate owns its streams, so
/// the result does not depend on scheduling.
pub fn run_study(
    config: &ScenarioConfig,
    n_reps: usize,
    inference: Option<InferenceConfig>,
) -> Result<StudyResult> {
    if n_reps < 2 {
        return Err(Error::Config(format!(
            "a study needs at least 2 replicates, got {n_reps}"
        )));
    }
    if let Some(inf) = inference {
        if inf.bootstrap < 2 || inf.draws == 0 || !(inf.level > 0.0 && inf.level < 1.0) {
            return Err(Error::Config(format!(
                "inference needs B >= 2, R >= 1 and a level in (0, 1); got B={}, R={}, level={}",
                inf.bootstrap, inf.draws, inf.level
            )));
        }
    }
    let generator = Generator::new(config.clone())?;
    let outcomes: Vec<Result<ReplicateRecord>> = (0..n_reps)
        .into_par_iter()
        .map(|r| generator.run_replicate(r, inference))
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push((r, e.to_string())),
        }
    }
    Ok(StudyResult {
        config: config.clone(),
        requested: n_reps,
        inference,
        true_icc: config.true_icc(),
        grid: generator.grid.clone(),
        labels: generator.labels.clone(),
        records,
        failures,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub dimension: usize,
    pub t: f64,
    pub coverage: Proportion,
}

impl StudyResult {
    pub fn succeeded(&self) -> usize {
        self.records.len()
    }

    fn covered(&self) -> impl Iterator<Item = &ReplicateCoverage> {
        self.records.iter().filter_map(|r| r.coverage.as_ref())
    }

    fn n_covered(&self) -> usize {
        self.covered().count()
    }

    /// Covering replicates per dimension and grid point.
    pub fn pointwise_tally(&self, method: Method, effect: usize) -> Vec<Vec<usize>> {
        let mut tally = vec![vec![0usize; self.grid.len()]; self.labels.len()];
        for c in self.covered() {
            for (p, row) in c.pointwise[method.index()][effect].iter().enumerate() {
                for (i, &ok) in row.iter().enumerate() {
                    tally[p][i] += ok as usize;
                }
            }
        }
        tally
    }

    pub fn simultaneous_tally(&self, method: Method, effect: usize) -> usize {
        self.covered()
            .filter(|c| c.simultaneous[method.index()][effect])
            .count()
    }

    /// Pointwise coverage averaged over the grid and dimensions.
    pub fn pointwise_coverage(&self, method: Method, effect: usize) -> Option<Proportion> {
        let n = self.n_covered();
        if n == 0 {
            return None;
        }
        let tally = self.pointwise_tally(method, effect);
        let cells = tally.iter().map(|r| r.len()).sum::<usize>();
        let hits: usize = tally.iter().flatten().sum();
        Some(Proportion::new(hits as f64 / (cells * n) as f64, n))
    }

    pub fn simultaneous_coverage(&self, method: Method, effect: usize) -> Option<Proportion> {
        let n = self.n_covered();
        (n > 0)
            .then(|| Proportion::new(self.simultaneous_tally(method, effect) as f64 / n as f64, n))
    }

    pub fn coverage_profile(&self, method: Method, effect: usize) -> Vec<ProfilePoint> {
        let n = self.n_covered();
        if n == 0 {
            return Vec::new();
        }
        let tally = self.pointwise_tally(method, effect);
        tally
            .iter()
            .enumerate()
            .flat_map(|(p, row)| {
                row.iter().enumerate().map(move |(i, &h)| ProfilePoint {
                    dimension: p,
                    t: self.grid[i],
                    coverage: Proportion::new(h as f64 / n as f64, n),
                })
            })
            .collect()
    }

    /// `max - min` of the pointwise coverage profile over grid and dimensions.
    pub fn profile_range(&self, method: Method, effect: usize) -> Option<f64> {
        let profile = self.coverage_profile(method, effect);
        if profile.is_empty() {
            return None;
        }
        let vals = profile.iter().map(|p| p.coverage.estimate);
        let max = vals.clone().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.fold(f64::INFINITY, f64::min);
        Some(max - min)
    }

    pub fn icc_interval_coverage(&self) -> Option<Proportion> {
        let n = self.n_covered();
        (n > 0).then(|| {
            Proportion::new(
                self.covered().filter(|c| c.icc_covered).count() as f64 / n as f64,
                n,
            )
        })
    }

    /// Mean, sample SD and standard error of the ICC estimates.
    pub fn icc_moments(&self) -> (f64, f64, f64) {
        let n = self.records.len() as f64;
        let mean = self.records.iter().map(|r| r.icc).sum::<f64>() / n;
        let var = self
            .records
            .iter()
            .map(|r| (r.icc - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        (mean, var.sqrt(), (var / n).sqrt())
    }

    pub fn median_ise_beta(&self, effect: usize) -> f64 {
        median(
            &mut self
                .records
                .iter()
                .map(|r| r.ise_beta[effect])
                .collect::<Vec<_>>(),
        )
    }

    /// Median ISE of `Q` or `S` for the model (`unstructured = false`) or the
    /// unstructured estimator.
    pub fn median_ise_cov(&self, which: Which, unstructured: bool) -> f64 {
        let j = unstructured as usize;
        median(
            &mut self
                .records
                .iter()
                .map(|r| match which {
                    Which::Q => r.ise_q[j],
                    Which::S => r.ise_s[j],
                })
                .collect::<Vec<_>>(),
        )
    }

    pub fn summary(&self) -> StudySummary {
        let (icc_mean, icc_sd, icc_se) = self.icc_moments();
        let mut ks: Vec<usize> = self.records.iter().map(|r| r.k_retained).collect();
        ks.sort_unstable();
        let mut coverage = Vec::new();
        let mut ranges = Vec::new();
        for m in Method::ALL {
            for a in 0..EFFECTS {
                if let (Some(pw), Some(sim)) = (
                    self.pointwise_coverage(m, a),
                    self.simultaneous_coverage(m, a),
                ) {
                    coverage.push(CoverageRow::new(
                        m,
                        "pointwise",
                        self.config.scenario,
                        a,
                        pw,
                    ));
                    coverage.push(CoverageRow::new(
                        m,
                        "simultaneous",
                        self.config.scenario,
                        a,
                        sim,
                    ));
                    ranges.push(RangeRow {
                        method: m.as_str().into(),
                        effect: effect_name(a).into(),
                        range: self.profile_range(m, a).unwrap_or(f64::NAN),
                    });
                }
            }
        }
        StudySummary {
            scenario: self.config.scenario.number(),
            n_subjects: self.config.n_subjects,
            seed: self.config.seed,
            requested: self.requested,
            succeeded: self.succeeded(),
            failed: self.failures.len(),
            inference: self.inference,
            true_icc: self.true_icc,
            icc_mean,
            icc_sd,
            icc_se,
            icc_interval_coverage: self.icc_interval_coverage(),
            k_retained_min: ks.first().copied().unwrap_or(0),
            k_retained_median: ks.get(ks.len() / 2).copied().unwrap_or(0),
            k_retained_max: ks.last().copied().unwrap_or(0),
            median_ise_beta: (0..EFFECTS).map(|a| self.median_ise_beta(a)).collect(),
            median_ise_q_model: self.median_ise_cov(Which::Q, false),
            median_ise_q_unstructured: self.median_ise_cov(Which::Q, true),
            median_ise_s_model: self.median_ise_cov(Which::S, false),
            median_ise_s_unstructured: self.median_ise_cov(Which::S, true),
            coverage,
            profile_ranges: ranges,
        }
    }
}

pub fn effect_name(a: usize) -> &'static str {
    ["beta0", "beta1", "beta2"]
        .get(a)
        .copied()
        .unwrap_or("beta?")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub method: String,
    pub coverage_type: String,
    pub scenario: u8,
    pub effect: String,
    pub estimate: f64,
    pub mc_se: f64,
}

impl CoverageRow {
    fn new(m: Method, kind: &str, scenario: Scenario, a: usize, p: Proportion) -> Self {
        Self {
            method: m.as_str().into(),
            coverage_type: kind.into(),
            scenario: scenario.number(),
            effect: effect_name(a).into(),
            estimate: p.estimate,
            mc_se: p.mc_se,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeRow {
    pub method: String,
    pub effect: String,
    pub range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub scenario: u8,
    pub n_subjects: usize,
    pub seed: u64,
    pub requested: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub inference: Option<InferenceConfig>,
    pub true_icc: f64,
    pub icc_mean: f64,
    pub icc_sd: f64,
    pub icc_se: f64,
    pub icc_interval_coverage: Option<Proportion>,
    pub k_retained_min: usize,
    pub k_retained_median: usize,
    pub k_retained_max: usize,
    pub median_ise_beta: Vec<f64>,
    pub median_ise_q_model: f64,
    pub median_ise_q_unstructured: f64,
    pub median_ise_s_model: f64,
    pub median_ise_s_unstructured: f64,
    pub coverage: Vec<CoverageRow>,
    pub profile_ranges: Vec<RangeRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub scenario: u8,
    pub method: String,
    pub effect: String,
    pub dimension: String,
    pub t: f64,
    pub coverage: f64,
    pub mc_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IseRow {
    pub scenario: u8,
    pub replicate: usize,
    pub term: String,
    pub estimator: String,
    pub ise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccRow {
    pub scenario: u8,
    pub replicate: usize,
    pub icc: f64,
    pub true_icc: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub covered: Option<bool>,
    pub k_retained: usize,
}

pub const COVERAGE_FILE: &str = "coverage.csv";
pub const PROFILE_FILE: &str = "coverage_profile.csv";
pub const ISE_FILE: &str = "ise.csv";
pub const ICC_FILE: &str = "icc.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Write the coverage table, coverage profile, ISE and ICC tables and a JSON
/// summary for one or more studies; returns the written paths.
pub fn write_report(studies: &[StudyResult], dir: &Path) -> Result<Vec<PathBuf>> {
    if studies.is_empty() {
        return Err(Error::Simulation("no studies to report".into()));
    }
    for s in studies {
        if s.records.is_empty() {
            return Err(Error::Simulation(format!(
                "scenario {}: none of {} replicates succeeded",
                s.config.scenario.number(),
                s.requested
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summaries: Vec<StudySummary> = studies.iter().map(|s| s.summary()).collect();

    let coverage: Vec<CoverageRow> = summaries.iter().flat_map(|s| s.coverage.clone()).collect();
    let mut profile = Vec::new();
    let mut ise = Vec::new();
    let mut icc = Vec::new();
    for s in studies {
        let sc = s.config.scenario.number();
        for m in Method::ALL {
            for a in 0..EFFECTS {
                for pt in s.coverage_profile(m, a) {
                    profile.push(ProfileRow {
                        scenario: sc,
                        method: m.as_str().into(),
                        effect: effect_name(a).into(),
                        dimension: s.labels[pt.dimension].clone(),
                        t: pt.t,
                        coverage: pt.coverage.estimate,
                        mc_se: pt.coverage.mc_se,
                    });
                }
            }
        }
        for r in &s.records {
            let mut push = |term: &str, estimator: &str, v: f64| {
                ise.push(IseRow {
                    scenario: sc,
                    replicate: r.replicate,
                    term: term.into(),
                    estimator: estimator.into(),
                    ise: v,
                })
            };
            for (a, v) in r.ise_beta.iter().enumerate() {
                push(effect_name(a), "model", *v);
            }
            push("Q", "model", r.ise_q[0]);
            push("Q", "unstructured", r.ise_q[1]);
            push("S", "model", r.ise_s[0]);
            push("S", "unstructured", r.ise_s[1]);
            icc.push(IccRow {
                scenario: sc,
                replicate: r.replicate,
                icc: r.icc,
                true_icc: s.true_icc,
                lower: r.coverage.as_ref().map(|c| c.icc_interval.0),
                upper: r.coverage.as_ref().map(|c| c.icc_interval.1),
                covered: r.coverage.as_ref().map(|c| c.icc_covered),
                k_retained: r.k_retained,
            });
        }
    }
    let paths = [
        COVERAGE_FILE,
        PROFILE_FILE,
        ISE_FILE,
        ICC_FILE,
        SUMMARY_FILE,
    ]
    .map(|f| dir.join(f));
    write_csv(
        &paths[0],
        &[
            "method",
            "coverage_type",
            "scenario",
            "effect",
            "estimate",
            "mc_se",
        ],
        &coverage,
    )?;
    write_csv(
        &paths[1],
        &[
            "scenario",
            "method",
            "effect",
            "dimension",
            "t",
            "coverage",
            "mc_se",
        ],
        &profile,
    )?;
    write_csv(
        &paths[2],
        &["scenario", "replicate", "term", "estimator", "ise"],
        &ise,
    )?;
    write_csv(
        &paths[3],
        &[
            "scenario",
            "replicate",
            "icc",
            "true_icc",
            "lower",
            "upper",
            "covered",
            "k_retained",
        ],
        &icc,
    )?;
    crate::export::write_json(&paths[4], &summaries)?;
    Ok(paths.to_vec())
}
