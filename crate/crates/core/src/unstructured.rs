//! Method-of-moments (unstructured) estimates of the random-intercept and
//! residual covariance functions in the first-stage basis.
//!
//! Regressing every product `θ_r[m] θ_r'[m']` of centred coefficient rows on
//! "same subject" and "same observation" indicators gives, per cell, the 2x2
//! normal equations `[a n; n n] [q; s] = [C; D]` with
//! `D = Σ_r θ_r θ_rᵀ`, `C = Σ_i (Σ_{r∈i} θ_r)(Σ_{r∈i} θ_r)ᵀ`, `a = Σ_i n_i²`
//! and `n` the number of rows. The solution is
//! `Q = (C - D) / (a - n)` and `S = (aD - nC) / (n (a - n))`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{layout_offsets, DimensionLayout, FunctionalDataset};
use crate::error::{Error, Result};
use crate::model::{CovarianceSurface, FittedModel};
use crate::numeric::trapezoid_weights;

/// Coefficient matrices of `Q` and `S` under the tensor basis `Φ(t) ⊗ Φ(t')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnstructuredCov {
    pub layout: Vec<DimensionLayout>,
    pub qcoef: DMatrix<f64>,
    pub scoef: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Q,
    S,
}

impl Which {
    pub fn as_str(&self) -> &'static str {
        match self {
            Which::Q => "Q",
            Which::S => "S",
        }
    }
}

/// Solve for the `Q` and `S` coefficient matrices from centred rows and
/// 0-based group labels.
pub fn unstructured_solve(
    centered: &DMatrix<f64>,
    groups: &[usize],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, m) = centered.shape();
    if groups.len() != n {
        return Err(Error::Shape(format!(
            "{} group labels for {n} rows",
            groups.len()
        )));
    }
    if n == 0 {
        return Err(Error::Grouping("no observations".into()));
    }
    let n_groups = groups.iter().copied().max().unwrap_or(0) + 1;
    let mut sums = DMatrix::zeros(n_groups, m);
    let mut sizes = vec![0usize; n_groups];
    for (r, &g) in groups.iter().enumerate() {
        let mut row = sums.row_mut(g);
        row += centered.row(r);
        sizes[g] += 1;
    }
    if sizes.contains(&0) {
        return Err(Error::Grouping("group labels must be dense".into()));
    }
    let a: usize = sizes.iter().map(|s| s * s).sum();
    if a == n {
        return Err(Error::Unidentifiable(
            "every subject has a single observation; the random-intercept covariance cannot be separated from the residual".into(),
        ));
    }
    let d = centered.transpose() * centered;
    let c = sums.transpose() * &sums;
    let (af, nf) = (a as f64, n as f64);
    let q = (&c - &d) / (af - nf);
    let s = (&d * af - &c * nf) / (nf * (af - nf));
    let sym = |x: DMatrix<f64>| (&x + x.transpose()) * 0.5;
    Ok((sym(q), sym(s)))
}

/// Coefficient rows with the model's fitted mean removed.
pub fn centered_coefficients(
    model: &FittedModel,
    data: &FunctionalDataset,
) -> Result<DMatrix<f64>> {
    Ok(&data.coefficients.coefs - model.fitted_mean_coefficients(data)?)
}

/// Unstructured estimate from data centred by a fitted model.
pub fn unstructured_fit(model: &FittedModel, data: &FunctionalDataset) -> Result<UnstructuredCov> {
    let centered = centered_coefficients(model, data)?;
    let (_, groups) = data.subject_index();
    let (qcoef, scoef) = unstructured_solve(&centered, &groups)?;
    Ok(UnstructuredCov {
        layout: data.layout().to_vec(),
        qcoef,
        scoef,
    })
}

impl UnstructuredCov {
    /// Row-major `M²` vector of the chosen coefficient matrix.
    pub fn coef_vec(&self, which: Which) -> Vec<f64> {
        let c = self.coef(which);
        (0..c.nrows())
            .flat_map(|i| (0..c.ncols()).map(move |j| c[(i, j)]))
            .collect()
    }

    pub fn coef(&self, which: Which) -> &DMatrix<f64> {
        match which {
            Which::Q => &self.qcoef,
            Which::S => &self.scoef,
        }
    }

    pub fn surface(&self, which: Which, grid: &[f64]) -> Result<CovarianceSurface> {
        tensor_surface(&self.layout, self.coef(which), grid)
    }
}

/// Surface `Φ_p(t)ᵀ C_{pp'} Φ_{p'}(t')` for every dimension pair, symmetrised.
pub fn tensor_surface(
    layout: &[DimensionLayout],
    coef: &DMatrix<f64>,
    grid: &[f64],
) -> Result<CovarianceSurface> {
    let offsets = layout_offsets(layout);
    let phi = layout
        .iter()
        .map(|d| d.basis.eval(grid))
        .collect::<Result<Vec<_>>>()?;
    let raw: Vec<Vec<DMatrix<f64>>> = (0..layout.len())
        .map(|p| {
            (0..layout.len())
                .map(|p2| {
                    let block = coef.view(
                        (offsets[p], offsets[p2]),
                        (layout[p].size(), layout[p2].size()),
                    );
                    &phi[p] * block * phi[p2].transpose()
                })
                .collect()
        })
        .collect();
    let blocks = (0..layout.len())
        .map(|p| {
            (0..layout.len())
                .map(|p2| (&raw[p][p2] + raw[p2][p].transpose()) * 0.5)
                .collect()
        })
        .collect();
    Ok(CovarianceSurface {
        grid: grid.to_vec(),
        labels: layout.iter().map(|d| d.label.clone()).collect(),
        blocks,
    })
}

/// `Σ_{p,p'} ∫∫ (A - B)²` by the double trapezoid rule.
pub fn cov_ise(a: &CovarianceSurface, b: &CovarianceSurface) -> Result<f64> {
    if a.grid != b.grid || a.dims() != b.dims() {
        return Err(Error::Shape(
            "covariance surfaces use different grids or dimension counts".into(),
        ));
    }
    let w = trapezoid_weights(&a.grid);
    let mut total = 0.0;
    for (ra, rb) in a.blocks.iter().zip(&b.blocks) {
        for (ba, bb) in ra.iter().zip(rb) {
            let diff = ba - bb;
            for j in 0..w.len() {
                for i in 0..w.len() {
                    total += w[i] * w[j] * diff[(i, j)] * diff[(i, j)];
                }
            }
        }
    }
    Ok(total)
}
