//! Univariate basis systems, least-squares coefficient fitting, Gram matrices
//! and the split construction of multivariate orthonormal bases.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{linspace, simpson_weights};

/// Default number of Simpson points for Gram integrals.
pub const GRAM_QUADRATURE_POINTS: usize = 1001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisKind {
    /// B-splines of the given order (4 = cubic) on a clamped knot vector.
    Bspline { order: usize, knots: Vec<f64> },
    /// Orthonormal Fourier system: constant, then sin/cos pairs of increasing frequency.
    Fourier,
    /// Orthonormal shifted Legendre polynomials of degree `0..size`.
    Legendre,
}

/// A univariate basis of `size` functions on `[0, domain_end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSystem {
    #[serde(flatten)]
    pub kind: BasisKind,
    pub size: usize,
    pub domain_end: f64,
}

impl BasisSystem {
    /// Cubic (or other order) B-splines with uniform interior knots.
    pub fn bspline(size: usize, order: usize, domain_end: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("B-spline order must be at least 1".into()));
        }
        if size < order {
            return Err(Error::Config(format!(
                "B-spline basis size {size} is smaller than its order {order}"
            )));
        }
        check_domain(domain_end)?;
        let intervals = size - order + 1;
        let mut knots = vec![0.0; order];
        for i in 1..intervals {
            knots.push(domain_end * i as f64 / intervals as f64);
        }
        knots.extend(std::iter::repeat_n(domain_end, order));
        Ok(Self {
            kind: BasisKind::Bspline { order, knots },
            size,
            domain_end,
        })
    }

    pub fn fourier(size: usize, domain_end: f64) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config(
                "Fourier basis needs at least one function".into(),
            ));
        }
        check_domain(domain_end)?;
        Ok(Self {
            kind: BasisKind::Fourier,
            size,
            domain_end,
        })
    }

    pub fn legendre(size: usize, domain_end: f64) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config(
                "Legendre basis needs at least one function".into(),
            ));
        }
        check_domain(domain_end)?;
        Ok(Self {
            kind: BasisKind::Legendre,
            size,
            domain_end,
        })
    }

    /// Number of knot intervals of a B-spline system, `None` otherwise.
    pub fn interval_count(&self) -> Option<usize> {
        match &self.kind {
            BasisKind::Bspline { order, .. } => Some(self.size - order + 1),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_domain(self.domain_end)?;
        if let BasisKind::Bspline { order, knots } = &self.kind {
            if knots.len() != self.size + order {
                return Err(Error::Config(format!(
                    "B-spline with {} functions of order {order} needs {} knots, got {}",
                    self.size,
                    self.size + order,
                    knots.len()
                )));
            }
            if knots.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::Config(
                    "B-spline knots must be non-decreasing".into(),
                ));
            }
        }
        Ok(())
    }

    /// Values of all basis functions at `t` written into `out` (length `size`).
    fn eval_point(&self, t: f64, out: &mut [f64]) {
        match &self.kind {
            BasisKind::Bspline { order, knots } => bspline_values(knots, *order, self.size, t, out),
            BasisKind::Fourier => {
                let period = self.domain_end;
                out[0] = 1.0 / period.sqrt();
                let amp = (2.0 / period).sqrt();
                for m in 1..self.size {
                    let freq = m.div_ceil(2) as f64;
                    let arg = 2.0 * PI * freq * t / period;
                    out[m] = if m % 2 == 1 {
                        amp * arg.sin()
                    } else {
                        amp * arg.cos()
                    };
                }
            }
            BasisKind::Legendre => {
                let x = 2.0 * t / self.domain_end - 1.0;
                let (mut p_prev, mut p_cur) = (1.0, x);
                for n in 0..self.size {
                    let p = match n {
                        0 => 1.0,
                        1 => x,
                        _ => {
                            let nf = n as f64;
                            let next = ((2.0 * nf - 1.0) * x * p_cur - (nf - 1.0) * p_prev) / nf;
                            p_prev = p_cur;
                            p_cur = next;
                            next
                        }
                    };
                    out[n] = p * ((2 * n + 1) as f64 / self.domain_end).sqrt();
                }
            }
        }
    }

    /// Evaluation matrix with one row per grid point and one column per function.
    pub fn eval(&self, grid: &[f64]) -> Result<DMatrix<f64>> {
        let tol = 1e-12 * self.domain_end.max(1.0);
        let mut out = DMatrix::zeros(grid.len(), self.size);
        let mut row = vec![0.0; self.size];
        for (i, &t) in grid.iter().enumerate() {
            if !(t >= -tol && t <= self.domain_end + tol) {
                return Err(Error::Domain(format!(
                    "evaluation point {t} outside basis domain [0, {}]",
                    self.domain_end
                )));
            }
            self.eval_point(t.clamp(0.0, self.domain_end), &mut row);
            for (j, v) in row.iter().enumerate() {
                out[(i, j)] = *v;
            }
        }
        Ok(out)
    }
}

fn check_domain(domain_end: f64) -> Result<()> {
    if !(domain_end > 0.0 && domain_end.is_finite()) {
        return Err(Error::Config(format!(
            "domain end must be positive, got {domain_end}"
        )));
    }
    Ok(())
}

/// Cox-de Boor recurrence, writing all `size` values (zeros outside the support).
fn bspline_values(knots: &[f64], order: usize, size: usize, t: f64, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let degree = order - 1;
    // span index i with knots[i] <= t < knots[i+1], clamped to the last
    // non-degenerate interval at the right end
    let last = size - 1;
    let span = if t >= knots[size] {
        let mut s = last;
        while s > degree && knots[s] >= knots[s + 1] {
            s -= 1;
        }
        s
    } else {
        let mut lo = degree;
        let mut hi = size;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t < knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    };
    let mut values = vec![0.0; order];
    let mut left = vec![0.0; order];
    let mut right = vec![0.0; order];
    values[0] = 1.0;
    for j in 1..order {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom != 0.0 { values[r] / denom } else { 0.0 };
            values[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        values[j] = saved;
    }
    for (r, v) in values.iter().enumerate() {
        out[span - degree + r] = *v;
    }
}

/// Ordinary least-squares fitter for curves sampled on a fixed grid.
///
/// The design QR factorisation is computed once and reused for every curve.
#[derive(Debug, Clone)]
pub struct LeastSquaresFitter {
    q_t: DMatrix<f64>,
    r: DMatrix<f64>,
    size: usize,
}

impl LeastSquaresFitter {
    pub fn new(basis: &BasisSystem, grid: &[f64]) -> Result<Self> {
        if grid.len() < basis.size {
            return Err(Error::Numerical(format!(
                "{} grid points cannot determine {} basis coefficients",
                grid.len(),
                basis.size
            )));
        }
        let design = basis.eval(grid)?;
        let qr = design.qr();
        let r = qr.r();
        let max_diag = (0..basis.size).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
        if (0..basis.size).any(|i| r[(i, i)].abs() <= 1e-10 * max_diag) || max_diag == 0.0 {
            return Err(Error::Numerical(format!(
                "design matrix of the {}-function basis is rank deficient on this grid",
                basis.size
            )));
        }
        Ok(Self {
            q_t: qr.q().transpose(),
            r,
            size: basis.size,
        })
    }

    pub fn fit(&self, values: &[f64]) -> Result<DVector<f64>> {
        if values.len() != self.q_t.ncols() {
            return Err(Error::Shape(format!(
                "curve has {} values but the grid has {} points",
                values.len(),
                self.q_t.ncols()
            )));
        }
        let qty = &self.q_t * DVector::from_column_slice(values);
        self.r.solve_upper_triangular(&qty).ok_or_else(|| {
            Error::Numerical(format!(
                "triangular solve failed for basis size {}",
                self.size
            ))
        })
    }

    /// Fit many curves at once; `values` has one curve per column.
    pub fn fit_columns(&self, values: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let qty = &self.q_t * values;
        self.r.solve_upper_triangular(&qty).ok_or_else(|| {
            Error::Numerical(format!(
                "triangular solve failed for basis size {}",
                self.size
            ))
        })
    }
}

/// One-shot least-squares fit of a single curve.
pub fn fit_coefficients(values: &[f64], grid: &[f64], basis: &BasisSystem) -> Result<DVector<f64>> {
    LeastSquaresFitter::new(basis, grid)?.fit(values)
}

/// Gram matrix `∫ B_m B_m'` by composite Simpson quadrature.
pub fn gram_matrix(basis: &BasisSystem, quad_points: usize) -> Result<DMatrix<f64>> {
    let weights = simpson_weights(quad_points, 0.0, basis.domain_end)?;
    let grid = linspace(0.0, basis.domain_end, quad_points);
    let values = basis.eval(&grid)?;
    let mut weighted = values.clone();
    for (i, w) in weights.iter().enumerate() {
        weighted.row_mut(i).scale_mut(*w);
    }
    let g = values.transpose() * weighted;
    Ok((&g + g.transpose()) * 0.5)
}

/// A multivariate basis whose `p`-th component is the restriction of a
/// univariate orthonormal system on `[0, P·T]` to `[(p-1)T, pT]`, shifted to `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitBasis {
    pub source: BasisSystem,
    pub parts: usize,
}

impl SplitBasis {
    pub fn new(source: BasisSystem, parts: usize) -> Result<Self> {
        if parts == 0 {
            return Err(Error::Config(
                "split basis needs at least one dimension".into(),
            ));
        }
        let gram = gram_matrix(&source, 4001)?;
        let dev = (gram - DMatrix::identity(source.size, source.size))
            .abs()
            .max();
        if dev > 1e-6 {
            return Err(Error::Config(format!(
                "split construction needs an orthonormal system; Gram deviates from identity by {dev:.3e}"
            )));
        }
        Ok(Self { source, parts })
    }

    pub fn size(&self) -> usize {
        self.source.size
    }

    /// Length `T` of each component domain.
    pub fn part_length(&self) -> f64 {
        self.source.domain_end / self.parts as f64
    }

    /// Per-dimension evaluation matrices (|grid| x K) on a grid within `[0, T]`.
    pub fn eval(&self, grid: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        let len = self.part_length();
        (0..self.parts)
            .map(|p| {
                let shifted: Vec<f64> = grid.iter().map(|t| t + p as f64 * len).collect();
                self.source.eval(&shifted)
            })
            .collect()
    }

    /// Multivariate Gram `Σ_p ∫ f_k^(p) f_l^(p)` by Simpson quadrature per component.
    pub fn gram(&self, quad_points: usize) -> Result<DMatrix<f64>> {
        let len = self.part_length();
        let weights = simpson_weights(quad_points, 0.0, len)?;
        let grid = linspace(0.0, len, quad_points);
        let mut total = DMatrix::zeros(self.size(), self.size());
        for values in self.eval(&grid)? {
            let mut weighted = values.clone();
            for (i, w) in weights.iter().enumerate() {
                weighted.row_mut(i).scale_mut(*w);
            }
            total += values.transpose() * weighted;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bspline_knot_layout() {
        let b = BasisSystem::bspline(80, 4, 100.0).unwrap();
        assert_eq!(b.interval_count(), Some(77));
        if let BasisKind::Bspline { knots, .. } = &b.kind {
            assert_eq!(knots.len(), 84);
            assert!(knots[..4].iter().all(|&k| k == 0.0));
            assert!(knots[80..].iter().all(|&k| k == 100.0));
        }
        assert!(matches!(
            BasisSystem::bspline(3, 4, 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cubic_without_interior_knots_is_bernstein() {
        let b = BasisSystem::bspline(4, 4, 1.0).unwrap();
        let grid = [0.0, 0.25, 0.5, 1.0];
        let m = b.eval(&grid).unwrap();
        for (i, &t) in grid.iter().enumerate() {
            let s: f64 = 1.0 - t;
            let bern = [s.powi(3), 3.0 * t * s * s, 3.0 * t * t * s, t.powi(3)];
            for j in 0..4 {
                assert!((m[(i, j)] - bern[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn bspline_partition_of_unity() {
        let b = BasisSystem::bspline(23, 4, 100.0).unwrap();
        let grid = linspace(0.0, 100.0, 997);
        let m = b.eval(&grid).unwrap();
        for i in 0..grid.len() {
            assert!((m.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluation_outside_domain_fails() {
        let b = BasisSystem::bspline(10, 4, 100.0).unwrap();
        assert!(matches!(b.eval(&[100.5]), Err(Error::Domain(_))));
        assert!(matches!(b.eval(&[-0.1]), Err(Error::Domain(_))));
    }

    #[test]
    fn fourier_columns() {
        let b = BasisSystem::fourier(3, 100.0).unwrap();
        let m = b.eval(&[10.0]).unwrap();
        let arg = 2.0 * PI * 10.0 / 100.0;
        assert!((m[(0, 0)] - 0.1).abs() < 1e-15);
        assert!((m[(0, 1)] - (0.02f64).sqrt() * arg.sin()).abs() < 1e-15);
        assert!((m[(0, 2)] - (0.02f64).sqrt() * arg.cos()).abs() < 1e-15);
    }

    #[test]
    fn legendre_degree_two_matches_gram_schmidt() {
        // Gram-Schmidt on {1, t, t^2} over [0, 1] gives sqrt(5) (6t^2 - 6t + 1).
        let b = BasisSystem::legendre(3, 1.0).unwrap();
        for t in [0.0, 0.3, 0.77, 1.0] {
            let m = b.eval(&[t]).unwrap();
            let expected = 5f64.sqrt() * (6.0 * t * t - 6.0 * t + 1.0);
            assert!((m[(0, 2)] - expected).abs() < 1e-13);
        }
    }

    #[test]
    fn gram_matrices() {
        let f = gram_matrix(&BasisSystem::fourier(13, 100.0).unwrap(), 1001).unwrap();
        assert!((f - DMatrix::identity(13, 13)).abs().max() < 1e-8);
        let l = gram_matrix(&BasisSystem::legendre(5, 100.0).unwrap(), 1001).unwrap();
        assert!((l - DMatrix::identity(5, 5)).abs().max() < 1e-8);
        let b = gram_matrix(&BasisSystem::bspline(4, 4, 1.0).unwrap(), 1001).unwrap();
        assert!((b[(0, 0)] - 1.0 / 7.0).abs() < 1e-12);
        let big = gram_matrix(&BasisSystem::bspline(30, 4, 100.0).unwrap(), 1001).unwrap();
        assert!(crate::numeric::min_eigenvalue(&big) >= -1e-10);
        assert!((&big - big.transpose()).abs().max() == 0.0);
    }

    #[test]
    fn fit_recovers_in_span_coefficients() {
        let b = BasisSystem::bspline(20, 4, 100.0).unwrap();
        let grid = linspace(0.0, 100.0, 101);
        let coef = DVector::from_fn(20, |i, _| (i as f64 * 0.7).sin() * 3.0 + 1.0);
        let y = b.eval(&grid).unwrap() * &coef;
        let fit = fit_coefficients(y.as_slice(), &grid, &b).unwrap();
        assert!((fit - coef).abs().max() < 1e-10);

        let constant = vec![5.0; 101];
        let c = fit_coefficients(&constant, &grid, &b).unwrap();
        let back = b.eval(&grid).unwrap() * c;
        assert!(back.iter().all(|v| (v - 5.0).abs() < 1e-10));
    }

    #[test]
    fn bsplines_reproduce_cubics() {
        let b = BasisSystem::bspline(15, 4, 100.0).unwrap();
        let grid = linspace(0.0, 100.0, 101);
        let y: Vec<f64> = grid
            .iter()
            .map(|t| 2.0 - 0.3 * t + 0.01 * t * t - 2e-5 * t * t * t)
            .collect();
        let c = fit_coefficients(&y, &grid, &b).unwrap();
        let back = b.eval(&grid).unwrap() * c;
        for (a, e) in back.iter().zip(&y) {
            assert!((a - e).abs() < 1e-10);
        }
    }

    #[test]
    fn rank_deficiency_names_the_basis_size() {
        let b = BasisSystem::bspline(20, 4, 100.0).unwrap();
        let grid = vec![0.0, 10.0, 20.0];
        let err = LeastSquaresFitter::new(&b, &grid).unwrap_err();
        assert!(err.to_string().contains("20"));
        // enough points but all in one knot interval
        let clustered = linspace(0.0, 1.0, 40);
        let err = LeastSquaresFitter::new(&b, &clustered).unwrap_err();
        assert!(matches!(err, Error::Numerical(m) if m.contains("20")));
    }

    #[test]
    fn split_fourier_is_orthonormal() {
        let split = SplitBasis::new(BasisSystem::fourier(13, 200.0).unwrap(), 2).unwrap();
        let g = split.gram(1001).unwrap();
        assert!((g - DMatrix::identity(13, 13)).abs().max() < 1e-8);

        let one = SplitBasis::new(BasisSystem::fourier(5, 100.0).unwrap(), 1).unwrap();
        let grid = linspace(0.0, 100.0, 11);
        assert_eq!(one.eval(&grid).unwrap()[0], one.source.eval(&grid).unwrap());
    }

    #[test]
    fn split_constant_component() {
        let split = SplitBasis::new(BasisSystem::legendre(1, 200.0).unwrap(), 2).unwrap();
        let parts = split.eval(&[0.0, 50.0, 100.0]).unwrap();
        let expected = 1.0 / (200f64).sqrt();
        for part in parts {
            assert!(part.iter().all(|v| (v - expected).abs() < 1e-15));
        }
        // squared norm 2 * T * 1/(2T) = 1
        assert!((split.gram(1001).unwrap()[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_rejects_non_orthonormal_source() {
        let b = BasisSystem::bspline(10, 4, 200.0).unwrap();
        assert!(matches!(SplitBasis::new(b, 2), Err(Error::Config(_))));
    }
}
