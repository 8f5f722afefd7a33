//! The basis-space functional mixed model: score projection, one REML fit per
//! score, and reconstruction of effect functions, covariance surfaces and ICC.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FunctionalDataset;
use crate::error::{Error, Result};
use crate::lmm::{reml_fit_stats, summarize_groups, GroupSummary, LmmFit, MultiStats, RemlOptions};
use crate::mvfpca::{mvfpca_fit, FpcaOptions, MvFpcBasis};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Coding {
    Continuous {
        #[serde(default = "default_true")]
        center: bool,
    },
    /// Integer-coded factor, dummy-coded against `reference`.
    Categorical { reference: i64 },
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    #[serde(flatten)]
    pub coding: Coding,
}

/// Covariates entering the fixed-effect design (the intercept is implicit).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelSpec {
    pub covariates: Vec<CovariateSpec>,
}

impl ModelSpec {
    pub fn continuous(mut self, name: &str) -> Self {
        self.covariates.push(CovariateSpec {
            name: name.into(),
            coding: Coding::Continuous { center: true },
        });
        self
    }

    pub fn categorical(mut self, name: &str, reference: i64) -> Self {
        self.covariates.push(CovariateSpec {
            name: name.into(),
            coding: Coding::Categorical { reference },
        });
        self
    }
}

/// One column of the fixed-effect design after coding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Term {
    Continuous { covariate: String, center: f64 },
    Dummy { covariate: String, level: i64 },
}

impl Term {
    pub fn name(&self) -> String {
        match self {
            Term::Continuous { covariate, .. } => covariate.clone(),
            Term::Dummy { covariate, level } => format!("{covariate}={level}"),
        }
    }
}

fn as_level(v: f64, name: &str) -> Result<i64> {
    if v.fract() != 0.0 || !v.is_finite() {
        return Err(Error::Spec(format!(
            "categorical covariate '{name}' has non-integer code {v}"
        )));
    }
    Ok(v as i64)
}

/// Resolve the model specification against training data: centring constants and dummy levels.
pub fn resolve_terms(spec: &ModelSpec, data: &FunctionalDataset) -> Result<Vec<Term>> {
    let keys = &data.coefficients.keys;
    let mut terms = Vec::new();
    for cov in &spec.covariates {
        let values = keys
            .iter()
            .map(|k| data.covariates.value(&k.subject, k.side, &cov.name))
            .collect::<Result<Vec<f64>>>()?;
        match cov.coding {
            Coding::Continuous { center } => {
                let c = if center {
                    values.iter().sum::<f64>() / values.len() as f64
                } else {
                    0.0
                };
                terms.push(Term::Continuous {
                    covariate: cov.name.clone(),
                    center: c,
                });
            }
            Coding::Categorical { reference } => {
                let levels = values
                    .iter()
                    .map(|&v| as_level(v, &cov.name))
                    .collect::<Result<BTreeSet<i64>>>()?;
                if !levels.contains(&reference) {
                    return Err(Error::Spec(format!(
                        "reference level {reference} of '{}' does not occur in the data",
                        cov.name
                    )));
                }
                for level in levels.into_iter().filter(|&l| l != reference) {
                    terms.push(Term::Dummy {
                        covariate: cov.name.clone(),
                        level,
                    });
                }
            }
        }
    }
    Ok(terms)
}

/// Design row `[1, coded covariates...]` from a value lookup.
fn design_row(
    terms: &[Term],
    mut lookup: impl FnMut(&str) -> Result<Option<f64>>,
) -> Result<DVector<f64>> {
    let mut row = DVector::zeros(terms.len() + 1);
    row[0] = 1.0;
    for (j, t) in terms.iter().enumerate() {
        row[j + 1] = match t {
            Term::Continuous { covariate, center } => {
                lookup(covariate)?.map_or(0.0, |v| v - center)
            }
            Term::Dummy { covariate, level } => match lookup(covariate)? {
                Some(v) => f64::from(as_level(v, covariate)? == *level),
                None => 0.0,
            },
        };
    }
    Ok(row)
}

/// Fixed-effect design matrix for every row of a dataset.
pub fn design_matrix(terms: &[Term], data: &FunctionalDataset) -> Result<DMatrix<f64>> {
    let keys = &data.coefficients.keys;
    let mut x = DMatrix::zeros(keys.len(), terms.len() + 1);
    for (i, k) in keys.iter().enumerate() {
        let row = design_row(terms, |name| {
            data.covariates.value(&k.subject, k.side, name).map(Some)
        })?;
        x.set_row(i, &row.transpose());
    }
    Ok(x)
}

/// Per-score convergence information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFitInfo {
    pub k: usize,
    pub lambda: f64,
    pub reml_value: f64,
    pub converged: bool,
    pub boundary: bool,
    pub at_lambda_max: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub n_obs: usize,
    pub n_subjects: usize,
    pub scores: Vec<ScoreFitInfo>,
}

impl FitReport {
    pub fn nonconverged(&self) -> Vec<usize> {
        self.scores
            .iter()
            .filter(|s| !s.converged)
            .map(|s| s.k)
            .collect()
    }

    pub fn boundary(&self) -> Vec<usize> {
        self.scores
            .iter()
            .filter(|s| s.boundary)
            .map(|s| s.k)
            .collect()
    }
}

/// A fitted basis-space model.
///
/// `bstar[(a, k)]` is the coefficient of effect `a` on score `k`;
/// `wald_var[(a, k)]` is its model-based variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub basis: MvFpcBasis,
    pub spec: ModelSpec,
    pub terms: Vec<Term>,
    pub bstar: DMatrix<f64>,
    pub wald_var: DMatrix<f64>,
    pub qstar: DVector<f64>,
    pub sstar: DVector<f64>,
    /// Bootstrap covariance of each effect's score coefficients, when computed.
    #[serde(default)]
    pub boot_cov: Option<Vec<DMatrix<f64>>>,
    pub icc: f64,
    pub report: FitReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FitOptions {
    pub fpca: FpcaOptions,
    pub reml: RemlOptions,
}

/// Everything the score models need, kept so resampling can reuse it.
#[derive(Debug, Clone)]
pub struct ModelFrame {
    pub x: DMatrix<f64>,
    pub scores: DMatrix<f64>,
    /// Subject index per row.
    pub groups: Vec<usize>,
    pub subjects: Vec<String>,
    /// Sufficient statistics per subject.
    pub summaries: Vec<GroupSummary>,
}

pub fn model_frame(
    data: &FunctionalDataset,
    terms: &[Term],
    basis: &MvFpcBasis,
) -> Result<ModelFrame> {
    if data.layout() != basis.layout.as_slice() {
        return Err(Error::Shape(
            "dataset layout does not match the basis layout".into(),
        ));
    }
    let x = design_matrix(terms, data)?;
    let scores = basis.project(&data.coefficients.coefs, true)?;
    let (subjects, groups) = data.subject_index();
    let summaries = summarize_groups(&x, &scores, &groups, subjects.len())?;
    Ok(ModelFrame {
        x,
        scores,
        groups,
        subjects,
        summaries,
    })
}

/// Fit every score from pooled statistics; score fits run in parallel.
pub fn fit_scores(stats: &MultiStats, reml: RemlOptions) -> Result<Vec<LmmFit>> {
    stats.check_design()?;
    (0..stats.responses())
        .into_par_iter()
        .map(|k| {
            reml_fit_stats(&stats.response(k), reml)
                .map_err(|e| Error::Model(format!("score {}: {e}", k + 1)))
        })
        .collect()
}

/// Component parts assembled from per-score fits.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEstimates {
    pub bstar: DMatrix<f64>,
    pub wald_var: DMatrix<f64>,
    pub qstar: DVector<f64>,
    pub sstar: DVector<f64>,
}

impl ScoreEstimates {
    pub fn from_fits(fits: &[LmmFit]) -> Self {
        let k = fits.len();
        let p = fits.first().map_or(0, |f| f.beta.len());
        let mut bstar = DMatrix::zeros(p, k);
        let mut wald_var = DMatrix::zeros(p, k);
        for (j, f) in fits.iter().enumerate() {
            bstar.set_column(j, &f.beta);
            wald_var.set_column(j, &f.beta_cov.diagonal());
        }
        Self {
            bstar,
            wald_var,
            qstar: DVector::from_iterator(k, fits.iter().map(|f| f.q)),
            sstar: DVector::from_iterator(k, fits.iter().map(|f| f.s)),
        }
    }

    pub fn icc(&self) -> Result<f64> {
        icc_from(&self.qstar, &self.sstar)
    }
}

/// `Σq / (Σq + Σs)`.
pub fn icc_from(q: &DVector<f64>, s: &DVector<f64>) -> Result<f64> {
    let sq = q.sum();
    let total = sq + s.sum();
    if !(total > 0.0) {
        return Err(Error::Model(
            "ICC is undefined when the total variance is zero".into(),
        ));
    }
    Ok((sq / total).clamp(0.0, 1.0))
}

/// Fit mv-FPCA and the score models.
pub fn fit_model(
    data: &FunctionalDataset,
    spec: &ModelSpec,
    options: FitOptions,
) -> Result<FittedModel> {
    let basis = mvfpca_fit(&data.coefficients, options.fpca)?;
    fit_model_with_basis(data, spec, basis, options.reml)
}

/// Fit the score models on a given basis.
pub fn fit_model_with_basis(
    data: &FunctionalDataset,
    spec: &ModelSpec,
    basis: MvFpcBasis,
    reml: RemlOptions,
) -> Result<FittedModel> {
    let terms = resolve_terms(spec, data)?;
    let frame = model_frame(data, &terms, &basis)?;
    let stats = MultiStats::from_groups(&frame.summaries)?;
    let fits = fit_scores(&stats, reml)?;
    let est = ScoreEstimates::from_fits(&fits);
    let icc = est.icc()?;
    let report = FitReport {
        n_obs: frame.x.nrows(),
        n_subjects: frame.subjects.len(),
        scores: fits
            .iter()
            .enumerate()
            .map(|(k, f)| ScoreFitInfo {
                k: k + 1,
                lambda: f.lambda,
                reml_value: f.reml_value,
                converged: f.converged,
                boundary: f.boundary,
                at_lambda_max: f.at_lambda_max,
            })
            .collect(),
    };
    Ok(FittedModel {
        basis,
        spec: spec.clone(),
        terms,
        bstar: est.bstar,
        wald_var: est.wald_var,
        qstar: est.qstar,
        sstar: est.sstar,
        boot_cov: None,
        icc,
        report,
    })
}

/// A `P x P` array of `|grid| x |grid|` covariance blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSurface {
    pub grid: Vec<f64>,
    pub labels: Vec<String>,
    /// `blocks[p][p2][(i, j)]` is the covariance of dimension `p` at `grid[i]`
    /// with dimension `p2` at `grid[j]`.
    pub blocks: Vec<Vec<DMatrix<f64>>>,
}

impl CovarianceSurface {
    /// Surface `Σ_k w_k ψ_k(t) ψ_k(t')ᵀ` from per-dimension eigenfunction values.
    pub fn from_diagonal(
        grid: &[f64],
        labels: Vec<String>,
        psi: &[DMatrix<f64>],
        weights: &DVector<f64>,
    ) -> Self {
        let scaled: Vec<DMatrix<f64>> = psi
            .iter()
            .map(|m| {
                let mut s = m.clone();
                for (k, mut col) in s.column_iter_mut().enumerate() {
                    col *= weights[k];
                }
                s
            })
            .collect();
        let blocks = (0..psi.len())
            .map(|p| {
                (0..psi.len())
                    .map(|p2| &scaled[p] * psi[p2].transpose())
                    .collect()
            })
            .collect();
        Self {
            grid: grid.to_vec(),
            labels,
            blocks,
        }
    }

    pub fn dims(&self) -> usize {
        self.blocks.len()
    }

    /// The `P·|grid|` square matrix with dimension blocks in order.
    pub fn stacked(&self) -> DMatrix<f64> {
        let g = self.grid.len();
        let p = self.dims();
        let mut out = DMatrix::zeros(p * g, p * g);
        for (a, row) in self.blocks.iter().enumerate() {
            for (b, blk) in row.iter().enumerate() {
                out.view_mut((a * g, b * g), (g, g)).copy_from(blk);
            }
        }
        out
    }

    /// `max |C^(pp')(t,t') - C^(p'p)(t',t)|`.
    pub fn symmetry_error(&self) -> f64 {
        let s = self.stacked();
        (&s - s.transpose()).abs().max()
    }

    /// Smallest eigenvalue of the stacked matrix relative to the largest magnitude.
    pub fn min_eigenvalue_relative(&self) -> f64 {
        let s = self.stacked();
        let e = nalgebra::SymmetricEigen::new((&s + s.transpose()) * 0.5).eigenvalues;
        let max = e.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if max == 0.0 {
            0.0
        } else {
            e.min() / max
        }
    }

    pub fn is_psd(&self, tol_rel: f64) -> bool {
        self.min_eigenvalue_relative() >= -tol_rel
    }

    /// `Σ_p ∫ C^(pp)(t,t) dt` by the trapezoid rule.
    pub fn trace_integral(&self) -> f64 {
        let w = crate::numeric::trapezoid_weights(&self.grid);
        self.blocks
            .iter()
            .enumerate()
            .map(|(p, row)| {
                (0..self.grid.len())
                    .map(|i| w[i] * row[p][(i, i)])
                    .sum::<f64>()
            })
            .sum()
    }
}

impl FittedModel {
    pub fn effect_count(&self) -> usize {
        self.bstar.nrows()
    }

    pub fn effect_names(&self) -> Vec<String> {
        std::iter::once("intercept".to_string())
            .chain(self.terms.iter().map(Term::name))
            .collect()
    }

    pub fn labels(&self) -> Vec<String> {
        self.basis.layout.iter().map(|d| d.label.clone()).collect()
    }

    /// Effect function `β_a(t)`, one vector per dimension. Scores are centred,
    /// so the intercept (`a = 0`) carries the mv-FPCA mean.
    pub fn effect_function(&self, a: usize, grid: &[f64]) -> Result<Vec<DVector<f64>>> {
        if a >= self.effect_count() {
            return Err(Error::Config(format!(
                "effect index {a} out of range (model has {} effects)",
                self.effect_count()
            )));
        }
        let coef = self.bstar.row(a).transpose();
        let mut out: Vec<DVector<f64>> = self
            .basis
            .eval_functions(grid)?
            .iter()
            .map(|psi| psi * &coef)
            .collect();
        if a == 0 {
            for (o, m) in out.iter_mut().zip(self.basis.eval_mean(grid)?) {
                *o += m;
            }
        }
        Ok(out)
    }

    pub fn reconstruct_q(&self, grid: &[f64]) -> Result<CovarianceSurface> {
        Ok(CovarianceSurface::from_diagonal(
            grid,
            self.labels(),
            &self.basis.eval_functions(grid)?,
            &self.qstar,
        ))
    }

    pub fn reconstruct_s(&self, grid: &[f64]) -> Result<CovarianceSurface> {
        Ok(CovarianceSurface::from_diagonal(
            grid,
            self.labels(),
            &self.basis.eval_functions(grid)?,
            &self.sstar,
        ))
    }

    pub fn icc(&self) -> Result<f64> {
        icc_from(&self.qstar, &self.sstar)
    }

    /// Design row for a covariate profile. Missing continuous values sit at
    /// their centre; missing categorical values at the reference level.
    pub fn design_row(&self, covariates: &BTreeMap<String, f64>) -> Result<DVector<f64>> {
        for cov in &self.spec.covariates {
            if let (Coding::Categorical { reference }, Some(&v)) =
                (&cov.coding, covariates.get(&cov.name))
            {
                let level = as_level(v, &cov.name)?;
                let known = level == *reference
                    || self
                        .terms
                        .iter()
                        .any(|t| matches!(t, Term::Dummy { covariate, level: l } if covariate == &cov.name && *l == level));
                if !known {
                    return Err(Error::Spec(format!(
                        "unknown level {level} for '{}'",
                        cov.name
                    )));
                }
            }
        }
        design_row(&self.terms, |name| Ok(covariates.get(name).copied()))
    }

    /// Predicted mean curve `μ(t) + Ψ(t)ᵀ B*ᵀ x`, one vector per dimension.
    pub fn predict_mean(
        &self,
        covariates: &BTreeMap<String, f64>,
        grid: &[f64],
    ) -> Result<Vec<DVector<f64>>> {
        let x = self.design_row(covariates)?;
        let coef = self.bstar.transpose() * x;
        self.basis
            .eval_functions(grid)?
            .iter()
            .zip(self.basis.eval_mean(grid)?)
            .map(|(psi, m)| Ok(psi * &coef + m))
            .collect()
    }

    /// Fitted mean coefficient rows (in the first-stage basis) for a dataset.
    pub fn fitted_mean_coefficients(&self, data: &FunctionalDataset) -> Result<DMatrix<f64>> {
        let x = design_matrix(&self.terms, data)?;
        let mut fitted = x * &self.bstar * &self.basis.eigencoefs;
        for mut row in fitted.row_iter_mut() {
            row += self.basis.mean.transpose();
        }
        Ok(fitted)
    }
}
