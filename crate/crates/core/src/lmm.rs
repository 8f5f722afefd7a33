//! Scalar linear mixed model with one random-intercept grouping factor,
//! fitted by profiled REML over the variance ratio `λ = q / s`.
//!
//! Everything is computed from per-group sufficient statistics. With
//! `V = I + λ J` inside each group, `V⁻¹ = I - w J` where `w = λ / (1 + λ n_i)`,
//! so `XᵀV⁻¹X = XᵀX - Σ_i w_i sx_i sx_iᵀ` and likewise for the other
//! cross-products. Groups of equal size share `w` and are pooled.
//!
//! The sums are taken over `y - X b` with `b` the OLS coefficients, which
//! leaves the criterion unchanged but keeps the squared sums free of
//! cancellation when the response has a large mean; `b` is added back to the
//! fixed effects at the end.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::min_eigenvalue;

/// Sufficient statistics of one group for several responses sharing `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub size: usize,
    pub sx: DVector<f64>,
    pub xtx: DMatrix<f64>,
    /// Per-response sums of `y`.
    pub sy: DVector<f64>,
    /// `p x K` matrix of `Σ x y_k`.
    pub xty: DMatrix<f64>,
    /// Per-response sums of `y²`.
    pub yty: DVector<f64>,
    /// `p x K` OLS coefficients removed from `y` before summing; shared by
    /// every group of one call.
    pub offset: DMatrix<f64>,
}

/// Summaries per group for responses `y` (`n x K`) and design `x` (`n x p`),
/// taken over the OLS residuals of `y`.
///
/// `groups[i]` is the 0-based group of row `i`; every group in
/// `0..n_groups` must be non-empty.
pub fn summarize_groups(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    groups: &[usize],
    n_groups: usize,
) -> Result<Vec<GroupSummary>> {
    let (n, p) = x.shape();
    let k = y.ncols();
    if y.nrows() != n || groups.len() != n {
        return Err(Error::Shape(format!(
            "design has {n} rows, response {} rows, grouping {} entries",
            y.nrows(),
            groups.len()
        )));
    }
    let offset = ols_offset(x, y);
    let resid = y - x * &offset;
    let mut out: Vec<GroupSummary> = (0..n_groups)
        .map(|_| GroupSummary {
            size: 0,
            sx: DVector::zeros(p),
            xtx: DMatrix::zeros(p, p),
            sy: DVector::zeros(k),
            xty: DMatrix::zeros(p, k),
            yty: DVector::zeros(k),
            offset: offset.clone(),
        })
        .collect();
    for i in 0..n {
        let g = groups[i];
        if g >= n_groups {
            return Err(Error::Grouping(format!(
                "row {i} has group {g} outside 0..{n_groups}"
            )));
        }
        let xi = x.row(i).transpose();
        let yi = resid.row(i).transpose();
        let s = &mut out[g];
        s.size += 1;
        s.sx += &xi;
        s.xtx.ger(1.0, &xi, &xi, 1.0);
        s.sy += &yi;
        s.xty.ger(1.0, &xi, &yi, 1.0);
        s.yty += yi.component_mul(&yi);
    }
    if let Some(g) = out.iter().position(|s| s.size == 0) {
        return Err(Error::Grouping(format!("group {g} has no observations")));
    }
    Ok(out)
}

/// OLS coefficients of every column of `y`, or zeros when `x` is too
/// ill-conditioned to solve (the design check reports that case later).
fn ols_offset(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let zeros = || DMatrix::zeros(x.ncols(), y.ncols());
    if x.nrows() < x.ncols() || x.ncols() == 0 {
        return zeros();
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().amax();
    if !(scale > 0.0) || r.diagonal().iter().any(|v| v.abs() <= 1e-12 * scale) {
        return zeros();
    }
    let qty = qr.q().transpose() * y;
    r.solve_upper_triangular(&qty).unwrap_or_else(zeros)
}

#[derive(Debug, Clone, PartialEq)]
struct SizeClass {
    size: usize,
    count: usize,
    sxx: DMatrix<f64>,
    sxy: DMatrix<f64>,
    syy: DVector<f64>,
}

/// Pooled statistics for `K` responses sharing one design and grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStats {
    n_obs: usize,
    n_groups: usize,
    xtx: DMatrix<f64>,
    xty: DMatrix<f64>,
    yty: DVector<f64>,
    offset: DMatrix<f64>,
    classes: Vec<SizeClass>,
}

impl MultiStats {
    /// Pool group summaries; the same summary may appear several times
    /// (each appearance is a separate group, as in a bootstrap resample).
    pub fn from_groups<'a>(groups: impl IntoIterator<Item = &'a GroupSummary>) -> Result<Self> {
        let mut iter = groups.into_iter().peekable();
        let first = iter
            .peek()
            .ok_or_else(|| Error::Grouping("no groups".into()))?;
        let p = first.sx.len();
        let k = first.sy.len();
        let mut stats = MultiStats {
            n_obs: 0,
            n_groups: 0,
            xtx: DMatrix::zeros(p, p),
            xty: DMatrix::zeros(p, k),
            yty: DVector::zeros(k),
            offset: first.offset.clone(),
            classes: Vec::new(),
        };
        let mut classes: BTreeMap<usize, SizeClass> = BTreeMap::new();
        for g in iter {
            stats.n_obs += g.size;
            stats.n_groups += 1;
            stats.xtx += &g.xtx;
            stats.xty += &g.xty;
            stats.yty += &g.yty;
            let c = classes.entry(g.size).or_insert_with(|| SizeClass {
                size: g.size,
                count: 0,
                sxx: DMatrix::zeros(p, p),
                sxy: DMatrix::zeros(p, k),
                syy: DVector::zeros(k),
            });
            c.count += 1;
            c.sxx.ger(1.0, &g.sx, &g.sx, 1.0);
            c.sxy.ger(1.0, &g.sx, &g.sy, 1.0);
            c.syy += g.sy.component_mul(&g.sy);
        }
        stats.classes = classes.into_values().collect();
        Ok(stats)
    }

    pub fn responses(&self) -> usize {
        self.yty.len()
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    /// Statistics for response `k` alone.
    pub fn response(&self, k: usize) -> LmmStats {
        LmmStats {
            n_obs: self.n_obs,
            n_groups: self.n_groups,
            xtx: self.xtx.clone(),
            xty: self.xty.column(k).into_owned(),
            yty: self.yty[k],
            offset: self.offset.column(k).into_owned(),
            classes: self
                .classes
                .iter()
                .map(|c| ClassStats {
                    size: c.size as f64,
                    count: c.count as f64,
                    sxx: c.sxx.clone(),
                    sxy: c.sxy.column(k).into_owned(),
                    syy: c.syy[k],
                })
                .collect(),
        }
    }

    /// Check that the pooled design has full column rank and `n > p`.
    pub fn check_design(&self) -> Result<()> {
        check_xtx(&self.xtx, self.n_obs)
    }
}

fn check_xtx(xtx: &DMatrix<f64>, n: usize) -> Result<()> {
    let p = xtx.nrows();
    if n <= p {
        return Err(Error::Design(format!(
            "{n} observations cannot support {p} fixed effects"
        )));
    }
    let max = xtx.diagonal().max();
    // scale columns to unit diagonal so the check is unit-free
    let d = xtx
        .diagonal()
        .map(|v| if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 });
    let scaled = DMatrix::from_fn(p, p, |i, j| xtx[(i, j)] * d[i] * d[j]);
    if !(max > 0.0) || xtx.diagonal().iter().any(|&v| v <= 0.0) || min_eigenvalue(&scaled) < 1e-10 {
        return Err(Error::Design(
            "fixed-effect design matrix is rank deficient".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
struct ClassStats {
    size: f64,
    count: f64,
    sxx: DMatrix<f64>,
    sxy: DVector<f64>,
    syy: f64,
}

/// Pooled statistics for a single response.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmStats {
    n_obs: usize,
    n_groups: usize,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    offset: DVector<f64>,
    classes: Vec<ClassStats>,
}

/// GLS quantities at a fixed `λ`.
struct Evaluation {
    loglik: f64,
    /// `dℓ/dλ`.
    slope: f64,
    beta: DVector<f64>,
    xvx_inv: DMatrix<f64>,
    rss: f64,
}

impl LmmStats {
    fn p(&self) -> usize {
        self.xtx.nrows()
    }

    fn evaluate(&self, lambda: f64) -> Result<Evaluation> {
        let mut xvx = self.xtx.clone();
        let mut xvy = self.xty.clone();
        let mut yvy = self.yty;
        let mut logdet_v = 0.0;
        for c in &self.classes {
            let w = lambda / (1.0 + lambda * c.size);
            if w != 0.0 {
                xvx -= &c.sxx * w;
                xvy -= &c.sxy * w;
                yvy -= w * c.syy;
            }
            logdet_v += c.count * (lambda * c.size).ln_1p();
        }
        let xvx = (&xvx + xvx.transpose()) * 0.5;
        let chol = xvx.clone().cholesky().ok_or_else(|| {
            Error::Numerical(format!("XᵀV⁻¹X is not positive definite at λ = {lambda:e}"))
        })?;
        let beta = chol.solve(&xvy);
        let rss = yvy - beta.dot(&xvy);
        let logdet_x: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let df = (self.n_obs - self.p()) as f64;
        let loglik = -0.5 * (logdet_v + df * rss.max(0.0).ln() + logdet_x);
        let xvx_inv = chol.inverse();
        // d/dλ of each term; dw/dλ = 1 / (1 + λ n)²
        let mut d_logdet_v = 0.0;
        let mut d_rss = 0.0;
        let mut d_logdet_x = 0.0;
        for c in &self.classes {
            let a = 1.0 + lambda * c.size;
            d_logdet_v += c.count * c.size / a;
            let group_resid_sq = c.syy - 2.0 * beta.dot(&c.sxy) + beta.dot(&(&c.sxx * &beta));
            d_rss -= group_resid_sq / (a * a);
            d_logdet_x -= (&xvx_inv * &c.sxx).trace() / (a * a);
        }
        let slope = -0.5 * (d_logdet_v + df * d_rss / rss + d_logdet_x);
        Ok(Evaluation {
            loglik,
            slope,
            beta,
            xvx_inv,
            rss,
        })
    }
}

/// Data for one scalar mixed model.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmDesign {
    pub response: DVector<f64>,
    /// Fixed-effect design, intercept column first.
    pub x: DMatrix<f64>,
    /// 0-based group index per observation.
    pub groups: Vec<usize>,
}

impl LmmDesign {
    /// Validate shapes, relabel groups densely in first-appearance order.
    pub fn new(response: DVector<f64>, x: DMatrix<f64>, groups: Vec<usize>) -> Result<Self> {
        if x.nrows() != response.len() || groups.len() != response.len() {
            return Err(Error::Shape(format!(
                "response {} rows, design {} rows, grouping {} entries",
                response.len(),
                x.nrows(),
                groups.len()
            )));
        }
        let mut relabel = BTreeMap::new();
        let groups = groups
            .iter()
            .map(|g| {
                let next = relabel.len();
                *relabel.entry(*g).or_insert(next)
            })
            .collect();
        Ok(Self {
            response,
            x,
            groups,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.groups.iter().copied().max().map_or(0, |m| m + 1)
    }

    pub fn stats(&self) -> Result<LmmStats> {
        let y = DMatrix::from_column_slice(self.response.len(), 1, self.response.as_slice());
        let summaries = summarize_groups(&self.x, &y, &self.groups, self.n_groups())?;
        Ok(MultiStats::from_groups(&summaries)?.response(0))
    }
}

/// Options for the REML search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemlOptions {
    pub lambda_max: f64,
    /// Tolerance on `log(1 + λ)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Points in the coarse scan that brackets the optimum.
    pub scan_points: usize,
}

impl Default for RemlOptions {
    fn default() -> Self {
        Self {
            lambda_max: 1e6,
            tol: 1e-10,
            max_iter: 200,
            scan_points: 200,
        }
    }
}

/// Result of one REML fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmFit {
    pub beta: DVector<f64>,
    pub beta_cov: DMatrix<f64>,
    pub q: f64,
    pub s: f64,
    pub lambda: f64,
    pub reml_value: f64,
    pub converged: bool,
    /// The optimum is at `λ = 0`.
    pub boundary: bool,
    /// The optimum hit `λ_max`.
    pub at_lambda_max: bool,
    pub iterations: usize,
}

/// Restricted log-likelihood (up to a constant) at a fixed `λ`.
pub fn profile_loglik(design: &LmmDesign, lambda: f64) -> Result<f64> {
    let stats = design.stats()?;
    check_xtx(&stats.xtx, stats.n_obs)?;
    profile_loglik_stats(&stats, lambda)
}

pub fn profile_loglik_stats(stats: &LmmStats, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!(
            "variance ratio must be non-negative, got {lambda}"
        )));
    }
    let v = stats.evaluate(lambda)?.loglik;
    if !v.is_finite() {
        return Err(Error::Numerical(format!(
            "restricted likelihood is not finite at λ = {lambda:e}"
        )));
    }
    Ok(v)
}

pub fn reml_fit(design: &LmmDesign, options: RemlOptions) -> Result<LmmFit> {
    let stats = design.stats()?;
    check_xtx(&stats.xtx, stats.n_obs)?;
    reml_fit_stats(&stats, options)
}

/// REML fit from pooled statistics. The design rank is assumed checked.
pub fn reml_fit_stats(stats: &LmmStats, options: RemlOptions) -> Result<LmmFit> {
    let upper = options.lambda_max.ln_1p();
    if stats.n_groups == stats.n_obs {
        // no replication: the criterion does not depend on λ
        return finish(stats, 0.0, true, true, false, 0);
    }
    let lambda_of = |theta: f64| theta.exp_m1();
    let f = |theta: f64| -> Result<f64> {
        let v = stats.evaluate(lambda_of(theta))?.loglik;
        if v.is_nan() {
            return Err(Error::Numerical(format!(
                "restricted likelihood is NaN at λ = {:e}",
                lambda_of(theta)
            )));
        }
        Ok(v)
    };

    // coarse scan to bracket the global maximum
    let m = options.scan_points.max(3);
    let step = upper / (m - 1) as f64;
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..m {
        let v = f(step * i as f64)?;
        if v > best.1 {
            best = (i, v);
        }
    }
    let mut a = step * best.0.saturating_sub(1) as f64;
    let mut b = (step * (best.0 + 1) as f64).min(upper);

    // golden-section refinement
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    let mut iterations = 0;
    while (b - a) > options.tol && iterations < options.max_iter {
        iterations += 1;
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    let converged = (b - a) <= options.tol;
    let mut theta = if fc >= fd { c } else { d };
    let mut value = fc.max(fd);
    // Function values resolve the optimum only to about sqrt(eps); bisect the
    // analytic slope inside the scan bracket to pin it to working precision.
    let slope = |t: f64| stats.evaluate(lambda_of(t)).map(|e| e.slope);
    let mut lo = step * best.0.saturating_sub(1) as f64;
    let mut hi = (step * (best.0 + 1) as f64).min(upper);
    if lo < theta && theta < hi && slope(lo)? > 0.0 && slope(hi)? < 0.0 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if slope(mid)? > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let polished = 0.5 * (lo + hi);
        let v = f(polished)?;
        if v >= value - 1e-12 * value.abs().max(1.0) {
            theta = polished;
            value = v;
        }
    }
    // compare with the scan winner and both ends of the search interval
    for cand in [step * best.0 as f64, upper] {
        let v = f(cand)?;
        if v > value {
            theta = cand;
            value = v;
        }
    }
    let at_zero = f(0.0)?;
    let boundary = at_zero >= value;
    if boundary {
        theta = 0.0;
    }
    let lambda = if boundary { 0.0 } else { lambda_of(theta) };
    let at_max = !boundary && upper - theta <= 10.0 * options.tol;
    finish(
        stats,
        lambda,
        converged || boundary,
        boundary,
        at_max,
        iterations,
    )
}

fn finish(
    stats: &LmmStats,
    lambda: f64,
    converged: bool,
    boundary: bool,
    at_lambda_max: bool,
    iterations: usize,
) -> Result<LmmFit> {
    let eval = stats.evaluate(lambda)?;
    if !eval.loglik.is_finite() {
        return Err(Error::Numerical(format!(
            "restricted likelihood is not finite at the optimum λ = {lambda:e}"
        )));
    }
    let df = (stats.n_obs - stats.p()) as f64;
    let s = eval.rss / df;
    if !(s > 0.0) {
        return Err(Error::Numerical(format!(
            "residual variance estimate {s:e} is not positive"
        )));
    }
    let beta_cov = eval.xvx_inv * s;
    Ok(LmmFit {
        beta: eval.beta + &stats.offset,
        beta_cov: (&beta_cov + beta_cov.transpose()) * 0.5,
        q: lambda * s,
        s,
        lambda,
        reml_value: eval.loglik,
        converged,
        boundary,
        at_lambda_max,
        iterations,
    })
}

/// Predicted random intercepts `λ n_i / (1 + λ n_i) · mean residual_i`.
pub fn fitted_blups(fit: &LmmFit, design: &LmmDesign) -> Vec<f64> {
    let g = design.n_groups();
    let resid = &design.response - &design.x * &fit.beta;
    let mut sum = vec![0.0; g];
    let mut count = vec![0usize; g];
    for (i, &grp) in design.groups.iter().enumerate() {
        sum[grp] += resid[i];
        count[grp] += 1;
    }
    (0..g)
        .map(|i| {
            let n = count[i] as f64;
            fit.lambda * n / (1.0 + fit.lambda * n) * (sum[i] / n)
        })
        .collect()
}
