//! Built-in numerical checks that can be run from a release binary.
//!
//! Each check compares a library routine against an independent oracle:
//! the natural-gradient solver against the closed-form Kalman posterior of
//! an affine sensor, analytic Jacobians and gradients against central finite
//! differences, and the systematic resampler against offspring counts
//! enumerated by hand. [`SelftestOptions::pose_jacobian_perturbation`] skews
//! the range-bearing pose Jacobian so callers can confirm a broken
//! derivative is caught.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gaussian::Gaussian;
use crate::models::{
    motion_jacobians, motion_step, wrap_angle, AffineModel, ControlInput, MeasurementModel, Pose,
    RangeBearing, VehicleParams,
};
use crate::proposal::{
    nano_solve, nll, nll_gradient, BatchItem, ExpectationMode, ProposalStrategy,
};
use crate::rbpf::systematic_indices;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelftestOptions {
    /// Added to every entry of the range-bearing pose Jacobian.
    pub pose_jacobian_perturbation: f64,
    /// Random fixtures per derivative check.
    pub fixtures: usize,
    pub seed: u64,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            pose_jacobian_perturbation: 0.0,
            fixtures: 1000,
            seed: 0x5e1f_7e57,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Range-bearing sensor whose pose Jacobian is offset by a constant.
struct SkewedRangeBearing(f64);

impl MeasurementModel for SkewedRangeBearing {
    fn predict(&self, pose: &Pose, landmark: &Vector2<f64>) -> Result<Vector2<f64>> {
        RangeBearing.predict(pose, landmark)
    }

    fn jacobian_pose(&self, pose: &Pose, landmark: &Vector2<f64>) -> Result<Matrix2x3<f64>> {
        Ok(RangeBearing.jacobian_pose(pose, landmark)?.add_scalar(self.0))
    }

    fn jacobian_landmark(&self, pose: &Pose, landmark: &Vector2<f64>) -> Result<Matrix2<f64>> {
        RangeBearing.jacobian_landmark(pose, landmark)
    }

    fn inverse(&self, pose: &Pose, z: &Vector2<f64>) -> Result<Vector2<f64>> {
        RangeBearing.inverse(pose, z)
    }

    fn residual(&self, z: &Vector2<f64>, z_hat: &Vector2<f64>) -> Vector2<f64> {
        RangeBearing.residual(z, z_hat)
    }

    fn angular_components(&self) -> &'static [usize] {
        RangeBearing.angular_components()
    }
}

/// Norm-wise relative error, with an absolute floor for tiny references.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-6);
    diff / scale
}

/// A random pose with `landmarks` noisy detections of landmarks 1 to 40 m away.
pub fn range_bearing_fixture<R: Rng + ?Sized>(rng: &mut R, landmarks: usize) -> (Pose, Vec<BatchItem>) {
    let pose = Pose::new(
        rng.random_range(-50.0..50.0),
        rng.random_range(-50.0..50.0),
        rng.random_range(-3.1..3.1),
    );
    let batch = (0..landmarks)
        .map(|_| {
            let range: f64 = rng.random_range(1.0..40.0);
            let phi: f64 = rng.random_range(-3.1..3.1);
            let m = Vector2::new(pose.x + range * phi.cos(), pose.y + range * phi.sin());
            let clean = RangeBearing.predict(&pose, &m).expect("fixture range is positive");
            let z = Vector2::new(
                clean[0] + rng.random_range(-1.0..1.0),
                wrap_angle(clean[1] + rng.random_range(-0.05..0.05)),
            );
            BatchItem { z, landmark_mean: m, landmark_cov: Matrix2::identity() }
        })
        .collect();
    (pose, batch)
}

fn timed(name: &'static str, f: impl FnOnce() -> std::result::Result<String, String>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckOutcome { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

fn kalman_equivalence() -> std::result::Result<String, String> {
    let model = AffineModel {
        h_pose: Matrix2x3::new(-1.0, 0.2, 0.5, 0.1, -0.9, -0.3),
        h_landmark: Matrix2::new(1.0, 0.1, -0.2, 0.8),
        offset: Vector2::new(0.3, -0.1),
    };
    let prior = Gaussian::new(
        DVector::from_vec(vec![1.0, -0.5, 0.2]),
        DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.02, 0.1, 0.4, -0.03, 0.02, -0.03, 0.05]),
    )
    .map_err(|e| e.to_string())?;
    let r = Matrix2::new(0.3, 0.05, 0.05, 0.2);
    let batch = [
        BatchItem { z: Vector2::new(4.0, 2.0), landmark_mean: Vector2::new(5.0, 1.0), landmark_cov: Matrix2::identity() },
        BatchItem { z: Vector2::new(-2.0, 3.5), landmark_mean: Vector2::new(-1.0, 3.0), landmark_cov: Matrix2::identity() },
    ];

    // information-form Kalman update
    let p0 = Matrix3::from_iterator(prior.cov.iter().copied());
    let x0 = Vector3::new(prior.mean[0], prior.mean[1], prior.mean[2]);
    let r_inv = r.try_inverse().ok_or("singular R")?;
    let mut info = p0.try_inverse().ok_or("singular prior")?;
    let mut rhs = Vector3::zeros();
    for item in &batch {
        let pred = model.h_pose * x0 + model.h_landmark * item.landmark_mean + model.offset;
        info += model.h_pose.transpose() * r_inv * model.h_pose;
        rhs += model.h_pose.transpose() * r_inv * (item.z - pred);
    }
    let p_kf = info.try_inverse().ok_or("singular posterior information")?;
    let x_kf = x0 + p_kf * rhs;

    let mut worst: f64 = 0.0;
    for expectation in [ExpectationMode::SigmaPoint, ExpectationMode::MeanOnly] {
        let one = ProposalStrategy { max_iters: 1, expectation, ..ProposalStrategy::default() };
        let sol = nano_solve(&prior, &batch, &r, &one, &model).map_err(|e| e.to_string())?;
        let dm = (0..3).map(|i| (sol.posterior.mean[i] - x_kf[i]).abs()).fold(0.0, f64::max);
        let dp = (0..9).map(|i| (sol.posterior.cov[i] - p_kf[i]).abs()).fold(0.0, f64::max);
        worst = worst.max(dm).max(dp);
        let two = ProposalStrategy { max_iters: 2, kl_threshold: 1e-300, expectation, ..ProposalStrategy::default() };
        let kl = nano_solve(&prior, &batch, &r, &two, &model).map_err(|e| e.to_string())?.last_step_kl;
        if kl >= 1e-12 {
            return Err(format!("second iteration moved by {kl:e} nats"));
        }
    }
    if worst < 1e-10 {
        Ok(format!("max deviation {worst:.1e}"))
    } else {
        Err(format!("max deviation {worst:.3e} from the Kalman posterior"))
    }
}

fn pose_jacobian<M: MeasurementModel>(model: &M, opts: &SelftestOptions) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..opts.fixtures {
        let (pose, batch) = range_bearing_fixture(&mut rng, 1);
        let m = batch[0].landmark_mean;
        let analytic = model.jacobian_pose(&pose, &m).map_err(|e| e.to_string())?;
        let mut numeric = Matrix2x3::zeros();
        for j in 0..3 {
            let shifted = |d: f64| {
                let mut v = pose.to_vector();
                v[j] += d;
                model.predict(&Pose::from_vector(&v), &m)
            };
            let (a, b) = (shifted(h).map_err(|e| e.to_string())?, shifted(-h).map_err(|e| e.to_string())?);
            numeric.set_column(j, &(model.residual(&a, &b) / (2.0 * h)));
        }
        worst = worst.max(relative_error(analytic.as_slice(), numeric.as_slice()));
    }
    verdict(worst, 1e-5)
}

fn landmark_jacobian(opts: &SelftestOptions) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 1);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..opts.fixtures {
        let (pose, batch) = range_bearing_fixture(&mut rng, 1);
        let m = batch[0].landmark_mean;
        let analytic = RangeBearing.jacobian_landmark(&pose, &m).map_err(|e| e.to_string())?;
        let mut numeric = Matrix2::zeros();
        for j in 0..2 {
            let mut dm = Vector2::zeros();
            dm[j] = h;
            let a = RangeBearing.predict(&pose, &(m + dm)).map_err(|e| e.to_string())?;
            let b = RangeBearing.predict(&pose, &(m - dm)).map_err(|e| e.to_string())?;
            numeric.set_column(j, &(RangeBearing.residual(&a, &b) / (2.0 * h)));
        }
        worst = worst.max(relative_error(analytic.as_slice(), numeric.as_slice()));
    }
    verdict(worst, 1e-5)
}

fn motion_jacobian(opts: &SelftestOptions) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 2);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let diff = |a: &Pose, b: &Pose| Vector3::new(a.x - b.x, a.y - b.y, wrap_angle(a.theta - b.theta)) / (2.0 * h);
    for _ in 0..opts.fixtures {
        let pose = Pose::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-3.1..3.1));
        let u = ControlInput::new(rng.random_range(-5.0..10.0), rng.random_range(-0.6..0.6));
        let params = VehicleParams { dt: rng.random_range(0.01..0.5), ..VehicleParams::default() };
        let (fx, fu) = motion_jacobians(&pose, &u, &params).map_err(|e| e.to_string())?;
        let step = |p: &Pose, c: &ControlInput| motion_step(p, c, &params).map_err(|e| e.to_string());
        let mut nx = Matrix3::zeros();
        for j in 0..3 {
            let mut plus = pose.to_vector();
            let mut minus = pose.to_vector();
            plus[j] += h;
            minus[j] -= h;
            nx.set_column(j, &diff(&step(&Pose::from_vector(&plus), &u)?, &step(&Pose::from_vector(&minus), &u)?));
        }
        let nv = diff(&step(&pose, &ControlInput::new(u.v + h, u.alpha))?, &step(&pose, &ControlInput::new(u.v - h, u.alpha))?);
        let na = diff(&step(&pose, &ControlInput::new(u.v, u.alpha + h))?, &step(&pose, &ControlInput::new(u.v, u.alpha - h))?);
        worst = worst
            .max(relative_error(fx.as_slice(), nx.as_slice()))
            .max(relative_error(fu.column(0).as_slice(), nv.as_slice()))
            .max(relative_error(fu.column(1).as_slice(), na.as_slice()));
    }
    verdict(worst, 1e-5)
}

fn gradient<M: MeasurementModel>(model: &M, opts: &SelftestOptions) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 3);
    let r = Matrix2::new(1.0, 0.0, 0.0, 3f64.to_radians().powi(2));
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..opts.fixtures {
        let count = rng.random_range(1..6);
        let (pose, batch) = range_bearing_fixture(&mut rng, count);
        let analytic = nll_gradient(&pose, &batch, &r, model).map_err(|e| e.to_string())?;
        let mut numeric = Vector3::zeros();
        for j in 0..3 {
            let at = |d: f64| {
                let mut v = pose.to_vector();
                v[j] += d;
                nll(&Pose::from_vector(&v), &batch, &r, model).map_err(|e| e.to_string())
            };
            numeric[j] = (at(h)? - at(-h)?) / (2.0 * h);
        }
        worst = worst.max(relative_error(analytic.as_slice(), numeric.as_slice()));
    }
    verdict(worst, 1e-5)
}

fn verdict(worst: f64, tolerance: f64) -> std::result::Result<String, String> {
    if worst < tolerance {
        Ok(format!("worst relative error {worst:.1e}"))
    } else {
        Err(format!("worst relative error {worst:.3e} exceeds {tolerance:e}"))
    }
}

fn resampler_enumeration() -> std::result::Result<String, String> {
    let counts = |w: &[f64], u: f64| {
        let mut c = vec![0usize; w.len()];
        for i in systematic_indices(w, u) {
            c[i] += 1;
        }
        c
    };
    // (0.5, 0.25, 0.25) padded to four slots puts positions (u + k) / 4
    // twice in the first parent and once in each of the others for every u
    let cases: [(&[f64], &[usize]); 3] = [
        (&[0.5, 0.25, 0.25, 0.0], &[2, 1, 1, 0]),
        (&[0.25, 0.25, 0.25, 0.25], &[1, 1, 1, 1]),
        (&[0.0, 1.0, 0.0], &[0, 3, 0]),
    ];
    let mut tried = 0;
    for (w, expected) in cases {
        for k in 0..1000 {
            let u = (k as f64 + 0.5) / 1000.0;
            tried += 1;
            let got = counts(w, u);
            if got != expected {
                return Err(format!("weights {w:?} at u={u}: counts {got:?}, expected {expected:?}"));
            }
        }
    }
    // non-integral expectations: every count is the floor or ceiling of N w
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let mut w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        let c = counts(&w, rng.random_range(0.0..1.0));
        tried += 1;
        if c.iter().sum::<usize>() != n {
            return Err(format!("{n} weights produced {} offspring", c.iter().sum::<usize>()));
        }
        for (ci, wi) in c.iter().zip(&w) {
            let expected = wi * n as f64;
            if (*ci as f64 - expected).abs() >= 1.0 + 1e-9 {
                return Err(format!("count {ci} strays from N w = {expected}"));
            }
        }
    }
    Ok(format!("{tried} draws match"))
}

/// Runs every check in a fixed order.
pub fn run(opts: &SelftestOptions) -> Vec<CheckOutcome> {
    let skew = opts.pose_jacobian_perturbation;
    let model = SkewedRangeBearing(skew);
    vec![
        timed("kalman-equivalence", kalman_equivalence),
        timed("measurement-pose-jacobian", || pose_jacobian(&model, opts)),
        timed("measurement-landmark-jacobian", || landmark_jacobian(opts)),
        timed("motion-jacobians", || motion_jacobian(opts)),
        timed("likelihood-gradient", || gradient(&model, opts)),
        timed("resampler-enumeration", resampler_enumeration),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_on_the_shipped_models() {
        let outcomes = run(&SelftestOptions::default());
        for o in &outcomes {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
        assert_eq!(outcomes.len(), 6);
    }

    #[test]
    fn skewed_jacobian_is_reported_by_name() {
        let opts = SelftestOptions { pose_jacobian_perturbation: 1e-3, fixtures: 50, ..SelftestOptions::default() };
        let failed: Vec<&str> = run(&opts).iter().filter(|o| !o.passed).map(|o| o.name).collect();
        assert_eq!(failed, ["measurement-pose-jacobian", "likelihood-gradient"]);
    }
}
