//! Small numerical building blocks shared across modules: quadrature weights,
//! the standard normal quantile, symmetric matrix functions and order statistics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Composite Simpson weights for `n` equally spaced points on `[a, b]`.
///
/// `n` must be odd and at least 3.
pub fn simpson_weights(n: usize, a: f64, b: f64) -> Result<Vec<f64>> {
    if n < 3 || n.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "Simpson quadrature needs an odd number of points >= 3, got {n}"
        )));
    }
    let h = (b - a) / (n - 1) as f64;
    let mut w = vec![0.0; n];
    for (i, wi) in w.iter_mut().enumerate() {
        *wi = if i == 0 || i == n - 1 {
            h / 3.0
        } else if i % 2 == 1 {
            4.0 * h / 3.0
        } else {
            2.0 * h / 3.0
        };
    }
    Ok(w)
}

/// Trapezoid weights on an arbitrary increasing grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut w = vec![0.0; n];
    for i in 1..n {
        let h = grid[i] - grid[i - 1];
        w[i - 1] += 0.5 * h;
        w[i] += 0.5 * h;
    }
    w
}

/// `n` equally spaced points from `a` to `b` inclusive.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => {
            let h = (b - a) / (n - 1) as f64;
            (0..n)
                .map(|i| if i == n - 1 { b } else { a + h * i as f64 })
                .collect()
        }
    }
}

/// The default evaluation grid `0, 1, ..., 100`.
pub fn percent_grid() -> Vec<f64> {
    (0..=100).map(f64::from).collect()
}

/// Standard normal quantile (Acklam's rational approximation, relative error
/// below 1.2e-9 over the open unit interval).
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// 1-based index `ceil(n * prob)` clamped to `[1, n]`.
///
/// A relative slack of 1e-9 absorbs binary rounding in products such as
/// `2000 * 0.95`.
pub fn ceiling_rank(n: usize, prob: f64) -> usize {
    let x = n as f64 * prob;
    let rank = (x - 1e-9 * x.abs().max(1.0)).ceil();
    (rank.max(1.0) as usize).min(n.max(1))
}

/// Order statistic at 1-based rank `ceil(n * prob)` of unsorted samples.
pub fn ceiling_quantile(samples: &[f64], prob: f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[ceiling_rank(sorted.len(), prob) - 1]
}

/// Symmetric eigendecomposition with eigenpairs sorted by descending eigenvalue.
pub fn sorted_symmetric_eigen(mat: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = symmetrize(mat);
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .total_cmp(&eig.eigenvalues[i])
            .then(i.cmp(&j))
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(mat: &DMatrix<f64>) -> DMatrix<f64> {
    (mat + mat.transpose()) * 0.5
}

/// Square root and inverse square root of a symmetric PSD matrix, with
/// eigenvalues floored at `floor_rel * max` before taking roots.
///
/// Returns the minimum and maximum raw eigenvalue as well so callers can
/// decide whether the matrix was acceptably conditioned.
pub struct SymmetricRoots {
    pub sqrt: DMatrix<f64>,
    pub inv_sqrt: DMatrix<f64>,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
}

pub fn symmetric_roots(mat: &DMatrix<f64>, floor_rel: f64) -> SymmetricRoots {
    let (values, vectors) = sorted_symmetric_eigen(mat);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let floor = floor_rel * max.max(0.0);
    let n = values.len();
    let mut root = DVector::zeros(n);
    let mut inv_root = DVector::zeros(n);
    for i in 0..n {
        let v = values[i].max(floor);
        if v > 0.0 {
            root[i] = v.sqrt();
            inv_root[i] = 1.0 / v.sqrt();
        }
    }
    let sqrt = &vectors * DMatrix::from_diagonal(&root) * vectors.transpose();
    let inv_sqrt = &vectors * DMatrix::from_diagonal(&inv_root) * vectors.transpose();
    SymmetricRoots {
        sqrt: symmetrize(&sqrt),
        inv_sqrt: symmetrize(&inv_sqrt),
        min_eigenvalue: min,
        max_eigenvalue: max,
    }
}

/// Minimum eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(mat: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(mat))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Block-diagonal matrix assembled from square blocks.
pub fn block_diagonal(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut offset = 0;
    for b in blocks {
        let k = b.nrows();
        out.view_mut((offset, offset), (k, k)).copy_from(b);
        offset += k;
    }
    out
}

/// Linear interpolation of `(xs, ys)` at `x`; `xs` increasing, `x` clamped to
/// the data range.
pub fn interp_linear(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let j = xs.partition_point(|&v| v <= x);
    let (x0, x1) = (xs[j - 1], xs[j]);
    let (y0, y1) = (ys[j - 1], ys[j]);
    if x == x0 {
        return y0;
    }
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_quantile_known_values() {
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-8);
        assert!((normal_quantile(0.5)).abs() < 1e-12);
        assert!((normal_quantile(0.995) - 2.5758293035489).abs() < 1e-8);
        assert!((normal_quantile(0.01) + 2.3263478740408408).abs() < 1e-8);
        assert!((normal_quantile(0.9999) - 3.719016485455709).abs() < 1e-8);
    }

    #[test]
    fn simpson_integrates_cubic_exactly() {
        let w = simpson_weights(11, 0.0, 2.0).unwrap();
        let x = linspace(0.0, 2.0, 11);
        let v: f64 = w.iter().zip(&x).map(|(w, x)| w * x.powi(3)).sum();
        assert!((v - 4.0).abs() < 1e-13);
        assert!(simpson_weights(10, 0.0, 1.0).is_err());
        assert!(simpson_weights(1, 0.0, 1.0).is_err());
    }

    #[test]
    fn ceiling_rank_handles_rounding() {
        assert_eq!(ceiling_rank(2000, 0.95), 1900);
        assert_eq!(ceiling_rank(100, 0.025), 3);
        assert_eq!(ceiling_rank(100, 0.975), 98);
        assert_eq!(ceiling_rank(10, 0.0), 1);
    }

    #[test]
    fn interpolation_hits_nodes() {
        let xs = [0.0, 1.0, 3.0];
        let ys = [1.0, 2.0, 6.0];
        assert_eq!(interp_linear(&xs, &ys, 1.0), 2.0);
        assert_eq!(interp_linear(&xs, &ys, 2.0), 4.0);
        assert_eq!(interp_linear(&xs, &ys, -1.0), 1.0);
    }
}
