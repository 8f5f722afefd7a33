//! Multivariate functional PCA on stacked basis coefficients under the
//! block Gram metric, with PVE truncation, score projection and reconstruction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{gram_matrix, GRAM_QUADRATURE_POINTS};
use crate::dataset::{layout_offsets, layout_total, CoefficientSet, DimensionLayout, ObsKey};
use crate::error::{Error, Result};
use crate::numeric::{block_diagonal, sorted_symmetric_eigen, symmetric_roots};

/// Relative floor below which eigenvalues (of the data operator or of W) count as zero.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// A fitted multivariate FPC basis.
///
/// Row `k` of `eigencoefs` holds the stacked coefficient vector `c_k` of the
/// k-th eigenfunction; rows are orthonormal under `gram`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvFpcBasis {
    pub layout: Vec<DimensionLayout>,
    pub mean: DVector<f64>,
    /// Retained eigenvalues, descending.
    pub eigenvalues: DVector<f64>,
    pub eigencoefs: DMatrix<f64>,
    pub gram: DMatrix<f64>,
    /// Every eigenvalue above the floor, retained or not, for the scree table.
    pub spectrum: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeRow {
    pub k: usize,
    pub eigenvalue: f64,
    pub cumulative_pve: f64,
}

/// Scores with the observation each row belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub keys: Vec<ObsKey>,
    pub scores: DMatrix<f64>,
}

/// Options for [`mvfpca_fit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpcaOptions {
    pub pve_target: f64,
    /// Defaults to `min(n - 1, M)`.
    pub k_max: Option<usize>,
}

impl Default for FpcaOptions {
    fn default() -> Self {
        Self {
            pve_target: 0.9999,
            k_max: None,
        }
    }
}

/// Block-diagonal Gram metric for a dimension layout.
pub fn layout_gram(layout: &[DimensionLayout]) -> Result<DMatrix<f64>> {
    let blocks = layout
        .iter()
        .map(|d| gram_matrix(&d.basis, GRAM_QUADRATURE_POINTS))
        .collect::<Result<Vec<_>>>()?;
    Ok(block_diagonal(&blocks))
}

/// Fit the multivariate FPC basis, computing Gram matrices from the layout.
pub fn mvfpca_fit(coeffs: &CoefficientSet, options: FpcaOptions) -> Result<MvFpcBasis> {
    let gram = layout_gram(&coeffs.layout)?;
    mvfpca_fit_with_gram(&coeffs.layout, &coeffs.coefs, &gram, options)
}

/// A Gram metric with its symmetric square roots, reusable across fits.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedMetric {
    pub gram: DMatrix<f64>,
    pub sqrt: DMatrix<f64>,
    pub inv_sqrt: DMatrix<f64>,
}

impl PreparedMetric {
    pub fn new(gram: &DMatrix<f64>) -> Result<Self> {
        let roots = symmetric_roots(gram, EIGEN_FLOOR);
        if !(roots.max_eigenvalue > 0.0)
            || roots.min_eigenvalue < EIGEN_FLOOR * roots.max_eigenvalue
        {
            return Err(Error::Metric(format!(
                "Gram metric is numerically singular (eigenvalues {:.3e} .. {:.3e})",
                roots.min_eigenvalue, roots.max_eigenvalue
            )));
        }
        Ok(Self {
            gram: gram.clone(),
            sqrt: roots.sqrt,
            inv_sqrt: roots.inv_sqrt,
        })
    }
}

/// Fit the multivariate FPC basis from a coefficient matrix (one row per
/// observation) and a precomputed metric.
pub fn mvfpca_fit_with_gram(
    layout: &[DimensionLayout],
    coefs: &DMatrix<f64>,
    gram: &DMatrix<f64>,
    options: FpcaOptions,
) -> Result<MvFpcBasis> {
    if coefs.nrows() < 2 {
        return Err(Error::Data(format!(
            "mv-FPCA needs at least 2 observations, got {}",
            coefs.nrows()
        )));
    }
    let metric = PreparedMetric::new(gram)?;
    mvfpca_fit_prepared(layout, coefs, &metric, options)
}

pub fn mvfpca_fit_prepared(
    layout: &[DimensionLayout],
    coefs: &DMatrix<f64>,
    metric: &PreparedMetric,
    options: FpcaOptions,
) -> Result<MvFpcBasis> {
    let gram = &metric.gram;
    let n = coefs.nrows();
    let m = coefs.ncols();
    if n < 2 {
        return Err(Error::Data(format!(
            "mv-FPCA needs at least 2 observations, got {n}"
        )));
    }
    if m != layout_total(layout) || gram.nrows() != m || gram.ncols() != m {
        return Err(Error::Shape(format!(
            "coefficient width {m}, layout size {}, metric {}x{}",
            layout_total(layout),
            gram.nrows(),
            gram.ncols()
        )));
    }
    if !(options.pve_target > 0.0 && options.pve_target <= 1.0) {
        return Err(Error::Config(format!(
            "PVE target must lie in (0, 1], got {}",
            options.pve_target
        )));
    }
    let roots = metric;

    let mean = coefs.row_mean().transpose();
    let mut centered = coefs.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let half = &centered * &roots.sqrt;
    let op = (half.transpose() * &half) / (n - 1) as f64;
    let (values, vectors) = sorted_symmetric_eigen(&op);

    let top = values[0];
    let kept = if top > 0.0 {
        values
            .iter()
            .take_while(|&&v| v > EIGEN_FLOOR * top)
            .count()
    } else {
        0
    };
    if kept == 0 {
        return Err(Error::Data("coefficient rows have no variation".into()));
    }
    let spectrum: Vec<f64> = values.iter().take(kept).copied().collect();
    let total: f64 = spectrum.iter().sum();
    let k_cap = options.k_max.unwrap_or((n - 1).min(m)).max(1).min(kept);
    let mut k_keep = k_cap;
    let mut acc = 0.0;
    for (k, v) in spectrum.iter().enumerate().take(k_cap) {
        acc += v;
        if acc / total >= options.pve_target - 1e-12 {
            k_keep = k + 1;
            break;
        }
    }

    let mut eigencoefs = DMatrix::zeros(k_keep, m);
    for k in 0..k_keep {
        let mut c = &roots.inv_sqrt * vectors.column(k);
        let mut lead = 0;
        for i in 1..m {
            if c[i].abs() > c[lead].abs() {
                lead = i;
            }
        }
        if c[lead] < 0.0 {
            c.neg_mut();
        }
        eigencoefs.set_row(k, &c.transpose());
    }

    Ok(MvFpcBasis {
        layout: layout.to_vec(),
        mean,
        eigenvalues: DVector::from_iterator(k_keep, spectrum.iter().take(k_keep).copied()),
        eigencoefs,
        gram: gram.clone(),
        spectrum,
    })
}

impl MvFpcBasis {
    /// Number of retained components.
    pub fn k(&self) -> usize {
        self.eigencoefs.nrows()
    }

    pub fn total_size(&self) -> usize {
        self.eigencoefs.ncols()
    }

    /// Build a basis from explicit parts, checking orthonormality to 1e-8.
    pub fn from_parts(
        layout: Vec<DimensionLayout>,
        gram: DMatrix<f64>,
        mean: DVector<f64>,
        eigenvalues: DVector<f64>,
        eigencoefs: DMatrix<f64>,
    ) -> Result<Self> {
        let m = layout_total(&layout);
        if eigencoefs.ncols() != m
            || gram.nrows() != m
            || mean.len() != m
            || eigenvalues.len() != eigencoefs.nrows()
        {
            return Err(Error::Shape("inconsistent basis parts".into()));
        }
        let basis = Self {
            layout,
            mean,
            spectrum: eigenvalues.iter().copied().collect(),
            eigenvalues,
            eigencoefs,
            gram,
        };
        let dev = basis.orthonormality_error();
        if dev > 1e-8 {
            return Err(Error::Metric(format!(
                "eigencoefficients are not orthonormal under the metric (max deviation {dev:.3e})"
            )));
        }
        Ok(basis)
    }

    /// Keep only the first `k` components.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k() {
            return Err(Error::Config(format!(
                "cannot keep {k} of {} components",
                self.k()
            )));
        }
        Ok(Self {
            eigenvalues: self.eigenvalues.rows(0, k).into_owned(),
            eigencoefs: self.eigencoefs.rows(0, k).into_owned(),
            ..self.clone()
        })
    }

    /// `max |C W Cᵀ - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let k = self.k();
        let g = &self.eigencoefs * &self.gram * self.eigencoefs.transpose();
        (g - DMatrix::identity(k, k)).abs().max()
    }

    /// `W Cᵀ`, mapping a coefficient row to its scores.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.gram * self.eigencoefs.transpose()
    }

    /// Scores of coefficient rows (one row per observation).
    pub fn project(&self, coefs: &DMatrix<f64>, centered: bool) -> Result<DMatrix<f64>> {
        if coefs.ncols() != self.total_size() {
            return Err(Error::Shape(format!(
                "coefficient rows have length {} but the basis expects {}",
                coefs.ncols(),
                self.total_size()
            )));
        }
        let proj = self.projector();
        if centered {
            let mut c = coefs.clone();
            for mut row in c.row_iter_mut() {
                row -= self.mean.transpose();
            }
            Ok(c * proj)
        } else {
            Ok(coefs * proj)
        }
    }

    /// Eigenfunctions on a grid: one `|grid| x K` matrix per dimension.
    pub fn eval_functions(&self, grid: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        let offsets = layout_offsets(&self.layout);
        self.layout
            .iter()
            .zip(offsets)
            .map(|(d, off)| {
                let phi = d.basis.eval(grid)?;
                let block = self.eigencoefs.columns(off, d.size());
                Ok(phi * block.transpose())
            })
            .collect()
    }

    /// Mean function on a grid, one vector per dimension.
    pub fn eval_mean(&self, grid: &[f64]) -> Result<Vec<DVector<f64>>> {
        let offsets = layout_offsets(&self.layout);
        self.layout
            .iter()
            .zip(offsets)
            .map(|(d, off)| Ok(d.basis.eval(grid)? * self.mean.rows(off, d.size())))
            .collect()
    }

    /// Curves from scores: one `n x |grid|` matrix per dimension.
    pub fn reconstruct(
        &self,
        scores: &DMatrix<f64>,
        centered: bool,
        grid: &[f64],
    ) -> Result<Vec<DMatrix<f64>>> {
        if scores.ncols() != self.k() {
            return Err(Error::Shape(format!(
                "scores have {} columns for a {}-component basis",
                scores.ncols(),
                self.k()
            )));
        }
        let funcs = self.eval_functions(grid)?;
        let means = if centered {
            Some(self.eval_mean(grid)?)
        } else {
            None
        };
        Ok(funcs
            .iter()
            .enumerate()
            .map(|(p, psi)| {
                let mut curves = scores * psi.transpose();
                if let Some(means) = &means {
                    for mut row in curves.row_iter_mut() {
                        row += means[p].transpose();
                    }
                }
                curves
            })
            .collect())
    }

    /// Eigenvalue table with cumulative PVE over the whole retained spectrum.
    pub fn scree_report(&self) -> Vec<ScreeRow> {
        let total: f64 = self.spectrum.iter().sum();
        let mut acc = 0.0;
        self.spectrum
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                acc += v;
                ScreeRow {
                    k: k + 1,
                    eigenvalue: v,
                    cumulative_pve: if k + 1 == self.spectrum.len() {
                        1.0
                    } else {
                        acc / total
                    },
                }
            })
            .collect()
    }
}

/// Project a coefficient set onto a basis, keeping the observation keys.
pub fn project_scores(
    basis: &MvFpcBasis,
    coeffs: &CoefficientSet,
    centered: bool,
) -> Result<ScoreMatrix> {
    if coeffs.layout != basis.layout {
        return Err(Error::Shape(
            "coefficient layout does not match the basis layout".into(),
        ));
    }
    Ok(ScoreMatrix {
        keys: coeffs.keys.clone(),
        scores: basis.project(&coeffs.coefs, centered)?,
    })
}
