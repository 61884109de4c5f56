//! Per-particle pose sampling distributions.
//!
//! Every solver starts from the motion prior `N(x_prior, P_prior)` obtained by
//! pushing the control noise through the vehicle model with the unscented
//! transform, and returns a Gaussian over the pose:
//!
//! * [`prior_solve`] returns the prior unchanged (classic FastSLAM sampling),
//! * [`unscented_solve`] applies a single sigma-point measurement update,
//! * [`nano_solve`] runs natural-gradient descent on the Gaussian parameters
//!   of `KL(q || prior) + E_q[l(x)]`, where `l` is the negative measurement
//!   log-likelihood. With the Fisher metric the iteration reads
//!
//!   ```text
//!   P_{r+1}^-1 = P_prior^-1 + E_r[d2l/dx2]
//!   x_{r+1}    = x_r - P_{r+1} E_r[dl/dx] - P_{r+1} P_prior^-1 (x_r - x_prior)
//!   ```
//!
//!   with expectations under the current iterate, and stops once the KL
//!   divergence between successive iterates drops under a threshold.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};
use crate::gaussian::{
    deviation, kl_divergence, ut_propagate_angular, weighted_mean, weighted_scatter, Gaussian,
    SigmaPointSet, UtParams,
};
use crate::models::{motion_step, wrap_angle, ControlInput, MeasurementModel, Pose, VehicleParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProposalKind {
    PriorOnly,
    Unscented,
    NaturalGradient,
}

/// How the expectations in the natural-gradient update are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpectationMode {
    SigmaPoint,
    MeanOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalStrategy {
    pub kind: ProposalKind,
    pub max_iters: usize,
    /// Stopping threshold on the KL divergence between successive iterates, nats.
    pub kl_threshold: f64,
    /// An iterate step larger than this (in KL) is reported as divergence.
    pub blowup_kl: f64,
    pub expectation: ExpectationMode,
    pub ut: UtParams,
}

impl ProposalStrategy {
    pub fn new(kind: ProposalKind) -> Self {
        Self {
            kind,
            max_iters: 10,
            kl_threshold: 1e-6,
            blowup_kl: 1e4,
            expectation: ExpectationMode::SigmaPoint,
            ut: UtParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 || !(self.kl_threshold > 0.0) || !(self.blowup_kl > 0.0) {
            return Err(SlamError::Config(format!(
                "proposal needs max_iters >= 1 and positive thresholds (got {self:?})"
            )));
        }
        Ok(())
    }
}

impl Default for ProposalStrategy {
    fn default() -> Self {
        Self::new(ProposalKind::NaturalGradient)
    }
}

/// One associated (measurement, landmark) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub z: Vector2<f64>,
    pub landmark_mean: Vector2<f64>,
    pub landmark_cov: Matrix2<f64>,
}

pub type AssociatedBatch = [BatchItem];

/// Motion prior for one particle: the control `u` with covariance
/// `control_noise` is pushed through the motion model from `prev_pose`, and
/// `regularizer` is added to keep the result full rank.
pub fn predict_prior(
    prev_pose: &Pose,
    u: &ControlInput,
    control_noise: &Matrix2<f64>,
    params: &VehicleParams,
    regularizer: &Matrix3<f64>,
    ut: &UtParams,
) -> Result<Gaussian> {
    // The pose enters with zero covariance, so its sigma points collapse onto
    // the mean; with n + kappa held at 3 the control-only transform is the
    // same estimate as the augmented 5-d one.
    let control = Gaussian::new(
        DVector::from_vec(vec![u.v, u.alpha]),
        DMatrix::from_iterator(2, 2, control_noise.iter().copied()),
    )?;
    let q = DMatrix::from_iterator(3, 3, regularizer.iter().copied());
    ut_propagate_angular(
        &control,
        |c| {
            let next = motion_step(prev_pose, &ControlInput::new(c[0], c[1]), params)?;
            Ok(DVector::from_vec(vec![next.x, next.y, next.theta]))
        },
        Some(&q),
        &[2],
        ut,
    )
}

fn information(r: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    r.cholesky()
        .map(|c| c.inverse())
        .ok_or(SlamError::NotPositiveDefinite("measurement noise"))
}

/// Negative measurement log-likelihood, constants dropped.
pub fn nll<M: MeasurementModel + ?Sized>(
    x: &Pose,
    batch: &AssociatedBatch,
    r: &Matrix2<f64>,
    model: &M,
) -> Result<f64> {
    let r_inv = information(r)?;
    batch.iter().try_fold(0.0, |acc, item| {
        let nu = model.residual(&item.z, &model.predict(x, &item.landmark_mean)?);
        Ok(acc + 0.5 * nu.dot(&(r_inv * nu)))
    })
}

/// `dl/dx = -sum G^T R^-1 (z - g(x, mu))`.
pub fn nll_gradient<M: MeasurementModel + ?Sized>(
    x: &Pose,
    batch: &AssociatedBatch,
    r: &Matrix2<f64>,
    model: &M,
) -> Result<Vector3<f64>> {
    let r_inv = information(r)?;
    batch.iter().try_fold(Vector3::zeros(), |acc, item| {
        let g = model.jacobian_pose(x, &item.landmark_mean)?;
        let nu = model.residual(&item.z, &model.predict(x, &item.landmark_mean)?);
        Ok(acc - g.transpose() * (r_inv * nu))
    })
}

/// Gauss-Newton Hessian `sum G^T R^-1 G`.
pub fn nll_hessian_gn<M: MeasurementModel + ?Sized>(
    x: &Pose,
    batch: &AssociatedBatch,
    r: &Matrix2<f64>,
    model: &M,
) -> Result<Matrix3<f64>> {
    let r_inv = information(r)?;
    batch.iter().try_fold(Matrix3::zeros(), |acc, item| {
        let g = model.jacobian_pose(x, &item.landmark_mean)?;
        Ok(acc + g.transpose() * r_inv * g)
    })
}

pub fn prior_solve(prior: &Gaussian) -> Gaussian {
    prior.clone()
}

fn pose_of(v: &DVector<f64>) -> Pose {
    Pose::new(v[0], v[1], v[2])
}

fn to_static3(v: &DVector<f64>) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

fn to_dynamic(m: &Matrix3<f64>) -> DMatrix<f64> {
    DMatrix::from_iterator(3, 3, m.iter().copied())
}

fn check_pose_gaussian(g: &Gaussian) -> Result<()> {
    if g.dim() != 3 {
        return Err(SlamError::DimensionMismatch(format!("pose gaussian has dimension {}", g.dim())));
    }
    Ok(())
}

/// Expected gradient and Gauss-Newton Hessian of the likelihood term under `q`.
fn expected_derivatives<M: MeasurementModel + ?Sized>(
    q: &Gaussian,
    batch: &AssociatedBatch,
    r: &Matrix2<f64>,
    model: &M,
    strategy: &ProposalStrategy,
) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    match strategy.expectation {
        ExpectationMode::MeanOnly => {
            let x = pose_of(&q.mean);
            Ok((nll_gradient(&x, batch, r, model)?, nll_hessian_gn(&x, batch, r, model)?))
        }
        ExpectationMode::SigmaPoint => {
            let sigma = SigmaPointSet::new(q, &strategy.ut)?;
            let mut grad = Vector3::zeros();
            let mut hess = Matrix3::zeros();
            for (p, w) in sigma.points.iter().zip(&sigma.weights) {
                if *w == 0.0 {
                    continue;
                }
                let x = pose_of(p);
                grad += nll_gradient(&x, batch, r, model)? * *w;
                hess += nll_hessian_gn(&x, batch, r, model)? * *w;
            }
            Ok((grad, hess))
        }
    }
}

/// Sigma-point estimate of `J(x, P) = KL(N(x, P) || prior) + E[l]`.
pub fn objective<M: MeasurementModel + ?Sized>(
    q: &Gaussian,
    prior: &Gaussian,
    batch: &AssociatedBatch,
    r: &Matrix2<f64>,
    model: &M,
    ut: &UtParams,
) -> Result<f64> {
    let sigma = SigmaPointSet::new(q, ut)?;
    let mut expected = 0.0;
    for (p, w) in sigma.points.iter().zip(&sigma.weights) {
        if *w != 0.0 {
            expected += w * nll(&pose_of(p), batch, r, model)?;
        }
    }
    Ok(kl_divergence(q, prior)? + expected)
}

#[derive(Debug, Clone)]
pub struct NanoSolution {
    pub posterior: Gaussian,
    pub iterations: usize,
    /// KL divergence between the last two iterates.
    pub last_step_kl: f64,
}

/// Natural-gradient Gaussian approximation of the measurement-conditioned
/// pose posterior, started at the prior.
pub fn nano_solve<M: MeasurementModel + ?Sized>(
    prior: &Gaussian,
    batch: &AssociatedBatch,
    r: &Matrix2<f64>,
    strategy: &ProposalStrategy,
    model: &M,
) -> Result<NanoSolution> {
    check_pose_gaussian(prior)?;
    strategy.validate()?;
    if batch.is_empty() {
        return Err(SlamError::Config("natural-gradient solve needs at least one associated measurement".into()));
    }
    let prior_info = prior
        .cholesky()?
        .inverse();
    let prior_info = Matrix3::from_iterator(prior_info.iter().copied());
    let prior_mean = to_static3(&prior.mean);

    // the heading stays unwrapped while iterating so that mean differences
    // are continuous; it is wrapped once on return
    let mut current = prior.clone();
    let mut last_step_kl = f64::INFINITY;
    let mut iterations = 0;
    while iterations < strategy.max_iters {
        let (grad, hess) = expected_derivatives(&current, batch, r, model, strategy)?;
        let info = prior_info + hess;
        let cov = info
            .cholesky()
            .ok_or_else(|| SlamError::Divergence("iterate information matrix is not positive definite".into()))?
            .inverse();
        let x_r = to_static3(&current.mean);
        let x_next = x_r - cov * (grad + prior_info * (x_r - prior_mean));
        let next = Gaussian::new(DVector::from_column_slice(x_next.as_slice()), to_dynamic(&cov))
            .map_err(|e| SlamError::Divergence(format!("iterate covariance: {e}")))?;
        last_step_kl = kl_divergence(&current, &next)?;
        iterations += 1;
        current = next;
        if !last_step_kl.is_finite() || last_step_kl > strategy.blowup_kl {
            return Err(SlamError::Divergence(format!(
                "successive iterates differ by {last_step_kl} nats"
            )));
        }
        if last_step_kl < strategy.kl_threshold {
            break;
        }
    }
    current.mean[2] = wrap_angle(current.mean[2]);
    Ok(NanoSolution {
        posterior: current,
        iterations,
        last_step_kl,
    })
}

/// Sigma-point Kalman update of the prior with the stacked batch.
pub fn unscented_solve<M: MeasurementModel + ?Sized>(
    prior: &Gaussian,
    batch: &AssociatedBatch,
    r: &Matrix2<f64>,
    model: &M,
    ut: &UtParams,
) -> Result<Gaussian> {
    check_pose_gaussian(prior)?;
    if batch.is_empty() {
        return Ok(prior.clone());
    }
    let k = batch.len();
    let sigma = SigmaPointSet::new(prior, ut)?;
    let images = sigma
        .points
        .iter()
        .map(|p| {
            let pose = pose_of(p);
            let mut z = DVector::zeros(2 * k);
            for (i, item) in batch.iter().enumerate() {
                z.fixed_rows_mut::<2>(2 * i)
                    .copy_from(&model.predict(&pose, &item.landmark_mean)?);
            }
            Ok(z)
        })
        .collect::<Result<Vec<_>>>()?;
    let angles: Vec<usize> = (0..k)
        .flat_map(|i| model.angular_components().iter().map(move |a| 2 * i + a))
        .collect();
    let z_mean = weighted_mean(&images, &sigma.weights, &angles);
    let mut s = weighted_scatter(&images, &z_mean, &images, &z_mean, &sigma.weights, &angles, &angles);
    for i in 0..k {
        let mut block = s.fixed_view_mut::<2, 2>(2 * i, 2 * i);
        block += r;
    }
    let cross = weighted_scatter(&sigma.points, &prior.mean, &images, &z_mean, &sigma.weights, &[2], &angles);
    let mut innovation = DVector::zeros(2 * k);
    for (i, item) in batch.iter().enumerate() {
        let z_hat = z_mean.fixed_rows::<2>(2 * i).into_owned();
        innovation
            .fixed_rows_mut::<2>(2 * i)
            .copy_from(&model.residual(&item.z, &z_hat));
    }
    let s_chol = s
        .clone()
        .cholesky()
        .ok_or(SlamError::NotPositiveDefinite("unscented innovation covariance"))?;
    // K = C S^-1, computed as (S^-1 C^T)^T
    let gain = s_chol.solve(&cross.transpose()).transpose();
    let mut mean = &prior.mean + &gain * innovation;
    mean[2] = wrap_angle(mean[2]);
    let cov = &prior.cov - &gain * s * gain.transpose();
    Gaussian::new(mean, cov)
}

/// Dispatches on the strategy; an empty batch always yields the prior.
pub fn solve<M: MeasurementModel + ?Sized>(
    strategy: &ProposalStrategy,
    prior: &Gaussian,
    batch: &AssociatedBatch,
    r: &Matrix2<f64>,
    model: &M,
) -> Result<Gaussian> {
    if batch.is_empty() {
        return Ok(prior_solve(prior));
    }
    match strategy.kind {
        ProposalKind::PriorOnly => Ok(prior_solve(prior)),
        ProposalKind::Unscented => unscented_solve(prior, batch, r, model, &strategy.ut),
        ProposalKind::NaturalGradient => {
            nano_solve(prior, batch, r, strategy, model).map(|s| s.posterior)
        }
    }
}

/// Squared Mahalanobis distance between two pose means under `cov`, with the
/// heading difference wrapped.
pub fn pose_mahalanobis2(a: &DVector<f64>, b: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let d = deviation(a, b, &[2]);
    let chol = cov
        .clone()
        .cholesky()
        .ok_or(SlamError::NotPositiveDefinite("pose covariance"))?;
    Ok(d.dot(&chol.solve(&d)))
}
