//! Multivariate Gaussian algebra and the unscented transform.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};
use crate::models::wrap_angle;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Symmetrises `cov` and makes sure it factors. A failed factorisation gets
/// one diagonal jitter of `1e-9 * trace / n`; a second failure is an error.
pub fn repair_covariance(cov: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !cov.is_square() {
        return Err(SlamError::DimensionMismatch(format!(
            "covariance is {}x{}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(SlamError::NotPositiveDefinite("covariance has non-finite entries"));
    }
    let mut sym = (&cov + cov.transpose()) * 0.5;
    if Cholesky::new(sym.clone()).is_some() {
        return Ok(sym);
    }
    let n = sym.nrows() as f64;
    let jitter = 1e-9 * sym.trace() / n;
    if !(jitter > 0.0) {
        return Err(SlamError::NotPositiveDefinite("covariance has non-positive trace"));
    }
    for i in 0..sym.nrows() {
        sym[(i, i)] += jitter;
    }
    if Cholesky::new(sym.clone()).is_some() {
        Ok(sym)
    } else {
        Err(SlamError::NotPositiveDefinite("covariance still indefinite after jitter"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Gaussian {
    /// Builds a Gaussian, repairing the covariance as in [`repair_covariance`].
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() {
            return Err(SlamError::DimensionMismatch(format!(
                "mean has {} entries but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        let cov = repair_covariance(cov)?;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new(self.cov.clone()).ok_or(SlamError::NotPositiveDefinite("gaussian covariance"))
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let chol = self.cholesky()?;
        let diff = x - &self.mean;
        let white = chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .ok_or(SlamError::NotPositiveDefinite("gaussian covariance"))?;
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        Ok(-0.5 * (white.norm_squared() + log_det + self.dim() as f64 * LN_2PI))
    }

    /// Draws `mean + chol(cov) * eps` with `eps` standard normal from `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let chol = self.cholesky()?;
        let eps = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| rng.sample(StandardNormal)));
        Ok(&self.mean + chol.l() * eps)
    }
}

/// Closed-form `KL(q || p)` between two Gaussians of equal dimension.
pub fn kl_divergence(q: &Gaussian, p: &Gaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(SlamError::DimensionMismatch(format!(
            "kl between {}-d and {}-d gaussians",
            q.dim(),
            p.dim()
        )));
    }
    let chol_p = p.cholesky()?;
    let chol_q = q.cholesky()?;
    let diff = &p.mean - &q.mean;
    let maha = diff.dot(&chol_p.solve(&diff));
    let trace = chol_p.solve(&q.cov).trace();
    let log_det = |c: &Cholesky<f64, Dyn>| -> f64 { c.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum() };
    let kl = 0.5 * (maha + trace - q.dim() as f64 - (log_det(&chol_q) - log_det(&chol_p)));
    Ok(kl.max(0.0))
}

/// Unscented-transform scaling. `kappa = None` uses `3 - n` for `n <= 3`
/// and `0` above that, which keeps the centre weight non-negative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UtParams {
    pub kappa: Option<f64>,
}

impl UtParams {
    pub fn kappa_for(&self, n: usize) -> f64 {
        self.kappa.unwrap_or(if n <= 3 { 3.0 - n as f64 } else { 0.0 })
    }
}

/// Symmetric `2n + 1` sigma-point set; the same weights serve mean and covariance.
#[derive(Debug, Clone)]
pub struct SigmaPointSet {
    pub points: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
}

impl SigmaPointSet {
    pub fn new(g: &Gaussian, params: &UtParams) -> Result<Self> {
        let n = g.dim();
        let kappa = params.kappa_for(n);
        let lambda = n as f64 + kappa;
        if !(lambda > 0.0) {
            return Err(SlamError::Config(format!("sigma-point spread n + kappa = {lambda} must be positive")));
        }
        let root = g.cholesky()?.l() * lambda.sqrt();
        let mut points = Vec::with_capacity(2 * n + 1);
        let mut weights = Vec::with_capacity(2 * n + 1);
        points.push(g.mean.clone());
        weights.push(kappa / lambda);
        for sign in [1.0, -1.0] {
            for i in 0..n {
                points.push(&g.mean + root.column(i) * sign);
                weights.push(0.5 / lambda);
            }
        }
        Ok(Self { points, weights })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn mean(&self) -> DVector<f64> {
        weighted_mean(&self.points, &self.weights, &[])
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        weighted_scatter(&self.points, &mean, &self.points, &mean, &self.weights, &[], &[])
    }
}

/// Weighted mean; components listed in `angles` are averaged as wrapped
/// deviations from the first point.
pub(crate) fn weighted_mean(points: &[DVector<f64>], weights: &[f64], angles: &[usize]) -> DVector<f64> {
    let mut mean = DVector::zeros(points[0].len());
    for (p, w) in points.iter().zip(weights) {
        mean.axpy(*w, p, 1.0);
    }
    let total: f64 = weights.iter().sum();
    for &a in angles {
        let anchor = points[0][a];
        let dev: f64 = points
            .iter()
            .zip(weights)
            .map(|(p, w)| w * wrap_angle(p[a] - anchor))
            .sum();
        mean[a] = wrap_angle(anchor * total + dev);
    }
    mean
}

pub(crate) fn deviation(p: &DVector<f64>, mean: &DVector<f64>, angles: &[usize]) -> DVector<f64> {
    let mut d = p - mean;
    for &a in angles {
        d[a] = wrap_angle(d[a]);
    }
    d
}

/// `sum_k w_k (a_k - a_mean)(b_k - b_mean)^T` with wrapped angular deviations.
pub(crate) fn weighted_scatter(
    a: &[DVector<f64>],
    a_mean: &DVector<f64>,
    b: &[DVector<f64>],
    b_mean: &DVector<f64>,
    weights: &[f64],
    a_angles: &[usize],
    b_angles: &[usize],
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a_mean.len(), b_mean.len());
    for ((pa, pb), w) in a.iter().zip(b).zip(weights) {
        let da = deviation(pa, a_mean, a_angles);
        let db = deviation(pb, b_mean, b_angles);
        out.ger(*w, &da, &db, 1.0);
    }
    out
}

/// Unscented estimate of the distribution of `f(X) + noise`, `X ~ g`.
pub fn ut_propagate<F>(
    g: &Gaussian,
    f: F,
    additive_cov: Option<&DMatrix<f64>>,
    params: &UtParams,
) -> Result<Gaussian>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    ut_propagate_angular(g, f, additive_cov, &[], params)
}

/// [`ut_propagate`] for maps whose outputs listed in `angles` live on the circle.
pub fn ut_propagate_angular<F>(
    g: &Gaussian,
    mut f: F,
    additive_cov: Option<&DMatrix<f64>>,
    angles: &[usize],
    params: &UtParams,
) -> Result<Gaussian>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let sigma = SigmaPointSet::new(g, params)?;
    let images = sigma.points.iter().map(&mut f).collect::<Result<Vec<_>>>()?;
    let m = images[0].len();
    if images.iter().any(|y| y.len() != m) {
        return Err(SlamError::DimensionMismatch("ut map output length varies".into()));
    }
    let mean = weighted_mean(&images, &sigma.weights, angles);
    let mut cov = weighted_scatter(&images, &mean, &images, &mean, &sigma.weights, angles, angles);
    if let Some(q) = additive_cov {
        if q.nrows() != m || q.ncols() != m {
            return Err(SlamError::DimensionMismatch(format!(
                "additive covariance is {}x{}, map output has {m} entries",
                q.nrows(),
                q.ncols()
            )));
        }
        cov += q;
    }
    Gaussian::new(mean, cov)
}
