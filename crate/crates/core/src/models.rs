//! Vehicle kinematics and range-bearing sensing.
//!
//! The motion model is the discrete Ackerman model driven by axle velocity and
//! steering angle, optionally tracking a point offset `(a, b)` from the rear
//! axle. The sensor returns range and bearing to point landmarks.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix3x2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};

/// Maps an angle onto the half-open interval `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(TAU);
    if t > PI {
        t -= TAU;
    }
    // rem_euclid can land exactly on TAU for tiny negative inputs
    if t <= -PI {
        t += TAU;
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Heading in `(-pi, pi]`.
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.theta)
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// Axle-centre velocity, m/s.
    pub v: f64,
    /// Steering angle, rad.
    pub alpha: f64,
}

impl ControlInput {
    pub fn new(v: f64, alpha: f64) -> Self {
        Self { v, alpha }
    }

    fn check(&self) -> Result<()> {
        if !(self.alpha.abs() < FRAC_PI_2) {
            return Err(SlamError::InvalidSteering(self.alpha));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub wheelbase: f64,
    pub track: f64,
    /// Longitudinal offset of the tracked point from the rear axle.
    pub offset_a: f64,
    /// Lateral offset of the tracked point.
    pub offset_b: f64,
    pub dt: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.83,
            track: 0.76,
            offset_a: 0.0,
            offset_b: 0.0,
            dt: 0.1,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.wheelbase > 0.0) || !(self.dt > 0.0) || !(self.track >= 0.0) {
            return Err(SlamError::Config(format!(
                "vehicle parameters need wheelbase > 0, dt > 0, track >= 0 (got {self:?})"
            )));
        }
        Ok(())
    }

    pub fn with_dt(&self, dt: f64) -> Self {
        Self { dt, ..*self }
    }

    /// The Victoria Park utility vehicle with its laser mount as the tracked point.
    pub fn victoria_park() -> Self {
        Self {
            offset_a: 3.78,
            offset_b: 0.50,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub range: f64,
    /// Bearing relative to the heading, in `(-pi, pi]`.
    pub bearing: f64,
}

impl Measurement {
    pub fn new(range: f64, bearing: f64) -> Self {
        Self {
            range,
            bearing: wrap_angle(bearing),
        }
    }

    pub fn to_vector(&self) -> Vector2<f64> {
        Vector2::new(self.range, self.bearing)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self::new(v[0], v[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
}

impl Landmark {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn to_vector(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self::new(v[0], v[1])
    }
}

/// Noise-free propagation of the pose through one control interval.
pub fn motion_step(pose: &Pose, u: &ControlInput, p: &VehicleParams) -> Result<Pose> {
    u.check()?;
    let (s, c) = pose.theta.sin_cos();
    let turn = u.v / p.wheelbase * u.alpha.tan();
    let x = pose.x + p.dt * (u.v * c - turn * (p.offset_a * s + p.offset_b * c));
    let y = pose.y + p.dt * (u.v * s + turn * (p.offset_a * c + p.offset_b * s));
    Ok(Pose::new(x, y, pose.theta + p.dt * turn))
}

/// Jacobians of [`motion_step`] with respect to the pose and to `(v, alpha)`.
pub fn motion_jacobians(
    pose: &Pose,
    u: &ControlInput,
    p: &VehicleParams,
) -> Result<(Matrix3<f64>, Matrix3x2<f64>)> {
    u.check()?;
    let (s, c) = pose.theta.sin_cos();
    let (a, b, dt, l) = (p.offset_a, p.offset_b, p.dt, p.wheelbase);
    let tan = u.alpha.tan();
    let sec2 = 1.0 + tan * tan;
    let turn = u.v / l * tan;

    let mut fx = Matrix3::identity();
    fx[(0, 2)] = dt * (-u.v * s - turn * (a * c - b * s));
    fx[(1, 2)] = dt * (u.v * c + turn * (-a * s + b * c));

    let lat_x = a * s + b * c;
    let lat_y = a * c + b * s;
    let fu = Matrix3x2::new(
        dt * (c - tan / l * lat_x),
        -dt * u.v / l * sec2 * lat_x,
        dt * (s + tan / l * lat_y),
        dt * u.v / l * sec2 * lat_y,
        dt * tan / l,
        dt * u.v / l * sec2,
    );
    Ok((fx, fu))
}

/// Converts the encoder (wheel) velocity into the axle-centre velocity.
pub fn axle_velocity(v_e: f64, alpha: f64, p: &VehicleParams) -> Result<f64> {
    let denominator = 1.0 - p.track * alpha.tan() / (2.0 * p.wheelbase);
    if !(denominator > 0.0) || !(alpha.abs() < FRAC_PI_2) {
        return Err(SlamError::SingularVelocityTransform { alpha, denominator });
    }
    Ok(v_e / denominator)
}

/// Inverse of [`axle_velocity`]; used when synthesising encoder readings.
pub fn encoder_velocity(v: f64, alpha: f64, p: &VehicleParams) -> f64 {
    v * (1.0 - p.track * alpha.tan() / (2.0 * p.wheelbase))
}

fn offsets(pose: &Pose, m: &Landmark) -> Result<(f64, f64, f64)> {
    let dx = m.x - pose.x;
    let dy = m.y - pose.y;
    let q = dx * dx + dy * dy;
    if !(q > 0.0) {
        return Err(SlamError::ZeroRange);
    }
    Ok((dx, dy, q))
}

pub fn predict_measurement(pose: &Pose, m: &Landmark) -> Result<Measurement> {
    let (dx, dy, q) = offsets(pose, m)?;
    Ok(Measurement::new(q.sqrt(), dy.atan2(dx) - pose.theta))
}

pub fn inverse_measurement(pose: &Pose, z: &Measurement) -> Result<Landmark> {
    if !(z.range > 0.0) {
        return Err(SlamError::ZeroRange);
    }
    let (s, c) = (z.bearing + pose.theta).sin_cos();
    Ok(Landmark::new(pose.x + z.range * c, pose.y + z.range * s))
}

pub fn jacobian_pose(pose: &Pose, m: &Landmark) -> Result<Matrix2x3<f64>> {
    let (dx, dy, q) = offsets(pose, m)?;
    let r = q.sqrt();
    Ok(Matrix2x3::new(
        -dx / r,
        -dy / r,
        0.0,
        dy / q,
        -dx / q,
        -1.0,
    ))
}

pub fn jacobian_landmark(pose: &Pose, m: &Landmark) -> Result<Matrix2<f64>> {
    let (dx, dy, q) = offsets(pose, m)?;
    let r = q.sqrt();
    Ok(Matrix2::new(dx / r, dy / r, -dy / q, dx / q))
}

/// A two-dimensional observation of a point landmark from a planar pose.
///
/// The filters are generic over this trait so that exact-arithmetic oracles
/// (an affine observation model) can drive the same code paths as the real
/// range-bearing sensor.
pub trait MeasurementModel: Sync {
    fn predict(&self, pose: &Pose, landmark: &Vector2<f64>) -> Result<Vector2<f64>>;

    fn jacobian_pose(&self, pose: &Pose, landmark: &Vector2<f64>) -> Result<Matrix2x3<f64>>;

    fn jacobian_landmark(&self, pose: &Pose, landmark: &Vector2<f64>) -> Result<Matrix2<f64>>;

    /// Landmark position that would produce `z` from `pose`.
    fn inverse(&self, pose: &Pose, z: &Vector2<f64>) -> Result<Vector2<f64>>;

    /// Innovation `z - z_hat`.
    fn residual(&self, z: &Vector2<f64>, z_hat: &Vector2<f64>) -> Vector2<f64> {
        z - z_hat
    }

    /// Indices of components that are angles and must be averaged on the circle.
    fn angular_components(&self) -> &'static [usize] {
        &[]
    }

    /// Distance from the sensor within which a landmark can explain `z`,
    /// before slack. `None` disables spatial pruning.
    fn candidate_radius(&self, _z: &Vector2<f64>) -> Option<f64> {
        None
    }

    /// Jacobians of [`MeasurementModel::inverse`] with respect to the pose and
    /// to the measurement, from the implicit function theorem.
    fn inverse_jacobians(
        &self,
        pose: &Pose,
        landmark: &Vector2<f64>,
    ) -> Result<(Matrix2x3<f64>, Matrix2<f64>)> {
        let gm_inv = self
            .jacobian_landmark(pose, landmark)?
            .try_inverse()
            .ok_or(SlamError::NotPositiveDefinite("singular landmark jacobian"))?;
        let gx = self.jacobian_pose(pose, landmark)?;
        Ok((-gm_inv * gx, gm_inv))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RangeBearing;

impl MeasurementModel for RangeBearing {
    fn predict(&self, pose: &Pose, landmark: &Vector2<f64>) -> Result<Vector2<f64>> {
        predict_measurement(pose, &Landmark::from_vector(landmark)).map(|z| z.to_vector())
    }

    fn jacobian_pose(&self, pose: &Pose, landmark: &Vector2<f64>) -> Result<Matrix2x3<f64>> {
        jacobian_pose(pose, &Landmark::from_vector(landmark))
    }

    fn jacobian_landmark(&self, pose: &Pose, landmark: &Vector2<f64>) -> Result<Matrix2<f64>> {
        jacobian_landmark(pose, &Landmark::from_vector(landmark))
    }

    fn inverse(&self, pose: &Pose, z: &Vector2<f64>) -> Result<Vector2<f64>> {
        inverse_measurement(pose, &Measurement::new(z[0], z[1])).map(|m| m.to_vector())
    }

    fn residual(&self, z: &Vector2<f64>, z_hat: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(z[0] - z_hat[0], wrap_angle(z[1] - z_hat[1]))
    }

    fn angular_components(&self) -> &'static [usize] {
        &[1]
    }

    fn candidate_radius(&self, z: &Vector2<f64>) -> Option<f64> {
        Some(z[0])
    }
}

/// Affine observation `z = Hx * pose + Hm * landmark + c`.
///
/// Not a physical sensor: it exists so that every nonlinear solver can be
/// checked against closed-form Kalman results.
#[derive(Debug, Clone, Copy)]
pub struct AffineModel {
    pub h_pose: Matrix2x3<f64>,
    pub h_landmark: Matrix2<f64>,
    pub offset: Vector2<f64>,
}

impl AffineModel {
    /// Relative-position sensor: `z = landmark - position`.
    pub fn relative_position() -> Self {
        Self {
            h_pose: Matrix2x3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0),
            h_landmark: Matrix2::identity(),
            offset: Vector2::zeros(),
        }
    }
}

impl MeasurementModel for AffineModel {
    fn predict(&self, pose: &Pose, landmark: &Vector2<f64>) -> Result<Vector2<f64>> {
        Ok(self.h_pose * pose.to_vector() + self.h_landmark * landmark + self.offset)
    }

    fn jacobian_pose(&self, _pose: &Pose, _landmark: &Vector2<f64>) -> Result<Matrix2x3<f64>> {
        Ok(self.h_pose)
    }

    fn jacobian_landmark(&self, _pose: &Pose, _landmark: &Vector2<f64>) -> Result<Matrix2<f64>> {
        Ok(self.h_landmark)
    }

    fn inverse(&self, pose: &Pose, z: &Vector2<f64>) -> Result<Vector2<f64>> {
        let hm_inv = self
            .h_landmark
            .try_inverse()
            .ok_or(SlamError::NotPositiveDefinite("singular landmark block"))?;
        Ok(hm_inv * (z - self.h_pose * pose.to_vector() - self.offset))
    }
}
