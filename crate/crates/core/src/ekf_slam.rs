//! Joint-state EKF-SLAM baseline.
//!
//! One Gaussian over `[pose; m_1; ...; m_M]`. Prediction touches only the
//! pose rows and columns; an update with `K` matched measurements costs
//! `O(K n^2)` for state dimension `n = 3 + 2M`, since the full covariance is
//! rewritten. Association uses the same gates as the particle filter.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2};

use crate::error::{Result, SlamError};
use crate::map_store::{associate_candidates, search_margin, AssociationSet, LandmarkEstimate, LandmarkId};
use crate::models::{motion_jacobians, motion_step, wrap_angle, ControlInput, Measurement, MeasurementModel, Pose, RangeBearing};
use crate::rbpf::{AssociationCounts, FilterConfig, StepResult};

#[derive(Debug, Clone)]
pub struct EkfSlam<M = RangeBearing> {
    config: FilterConfig,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    /// Landmark id of each 2-row block, in block order.
    ids: Vec<LandmarkId>,
    blocks: HashMap<LandmarkId, usize>,
    observations: Vec<u32>,
    next_id: LandmarkId,
    model: M,
}

impl EkfSlam<RangeBearing> {
    pub fn new(config: FilterConfig, initial_pose: Pose) -> Result<Self> {
        Self::with_model(config, initial_pose, RangeBearing)
    }
}

impl<M: MeasurementModel> EkfSlam<M> {
    /// Starts from `initial_pose` with the prior regularizer as pose covariance.
    /// Only the noise, gates, regularizer, search slack and vehicle fields of
    /// `config` are used.
    pub fn with_model(config: FilterConfig, initial_pose: Pose, model: M) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            mean: DVector::from_column_slice(initial_pose.to_vector().as_slice()),
            cov: DMatrix::from_diagonal(&DVector::from_column_slice(&config.regularizer)),
            config,
            ids: Vec::new(),
            blocks: HashMap::new(),
            observations: Vec::new(),
            next_id: 0,
            model,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn landmark_count(&self) -> usize {
        self.ids.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.mean[0], self.mean[1], self.mean[2])
    }

    pub fn pose_cov(&self) -> Matrix3<f64> {
        self.cov.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Block index of landmark `id`.
    pub fn block_of(&self, id: LandmarkId) -> Option<usize> {
        self.blocks.get(&id).copied()
    }

    /// Landmark id stored in block `block`.
    pub fn id_of(&self, block: usize) -> Option<LandmarkId> {
        self.ids.get(block).copied()
    }

    /// Marginal of block `block`.
    pub fn landmark(&self, block: usize) -> LandmarkEstimate {
        let o = 3 + 2 * block;
        LandmarkEstimate {
            id: self.ids[block],
            mean: self.mean.fixed_rows::<2>(o).into_owned(),
            cov: self.cov.fixed_view::<2, 2>(o, o).into_owned(),
            observation_count: self.observations[block],
        }
    }

    pub fn landmarks(&self) -> Vec<LandmarkEstimate> {
        (0..self.ids.len()).map(|b| self.landmark(b)).collect()
    }

    /// Whether the joint covariance currently factors; cubic in the state size.
    pub fn covariance_is_spd(&self) -> bool {
        self.cov.clone().cholesky().is_some()
    }

    /// Propagates the pose through the motion model over `dt` seconds.
    pub fn predict(&mut self, u: &ControlInput, dt: f64) -> Result<()> {
        let params = self.config.vehicle.with_dt(dt);
        params.validate()?;
        let pose = self.pose();
        let next = motion_step(&pose, u, &params)?;
        let (fx, fu) = motion_jacobians(&pose, u, &params)?;
        let n = self.dim();

        let ppp = self.pose_cov();
        let q = self.config.noise.control_cov();
        let new_ppp = fx * ppp * fx.transpose() + fu * q * fu.transpose() + self.config.regularizer_matrix();
        if n > 3 {
            let cross = fx * self.cov.view((0, 3), (3, n - 3));
            self.cov.view_mut((0, 3), (3, n - 3)).copy_from(&cross);
            self.cov.view_mut((3, 0), (n - 3, 3)).copy_from(&cross.transpose());
        }
        self.cov
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&((new_ppp + new_ppp.transpose()) * 0.5));
        self.mean[0] = next.x;
        self.mean[1] = next.y;
        self.mean[2] = next.theta;
        Ok(())
    }

    /// Gated association of a batch against the current state.
    pub fn associate(&self, zs: &[Vector2<f64>]) -> AssociationSet {
        let pose = self.pose();
        let pose_cov = self.pose_cov();
        let r = self.config.noise.measurement_cov();
        let landmarks = self.landmarks();
        let reach = zs
            .iter()
            .map(|z| self.model.candidate_radius(z))
            .try_fold(0.0f64, |acc, r| r.map(|r| acc.max(r)));
        let candidates: Vec<&LandmarkEstimate> = match reach {
            Some(reach) => {
                let radius = reach + search_margin(&pose_cov, &r, self.config.search_slack);
                landmarks
                    .iter()
                    .filter(|lm| (lm.mean - pose.position()).norm() <= radius)
                    .collect()
            }
            None => landmarks.iter().collect(),
        };
        associate_candidates(&candidates, &pose_cov, &pose, zs, &r, &self.config.gates, &self.model)
    }

    /// Joint Kalman update with the matched `(landmark id, measurement)` pairs.
    pub fn update_joint(&mut self, matches: &[(LandmarkId, Vector2<f64>)]) -> Result<()> {
        if matches.is_empty() {
            return Ok(());
        }
        let n = self.dim();
        let k = matches.len();
        let pose = self.pose();
        let r = self.config.noise.measurement_cov();

        // P H^T assembled from the five state columns each row pair touches
        let mut pht = DMatrix::zeros(n, 2 * k);
        let mut rows = Vec::with_capacity(k);
        let mut innovation = DVector::zeros(2 * k);
        for (i, (id, z)) in matches.iter().enumerate() {
            let b = self
                .block_of(*id)
                .ok_or_else(|| SlamError::Data(format!("unknown landmark id {id}")))?;
            let o = 3 + 2 * b;
            let m: Vector2<f64> = self.mean.fixed_rows::<2>(o).into_owned();
            let gx = self.model.jacobian_pose(&pose, &m)?;
            let gm = self.model.jacobian_landmark(&pose, &m)?;
            let nu = self.model.residual(z, &self.model.predict(&pose, &m)?);
            innovation.fixed_rows_mut::<2>(2 * i).copy_from(&nu);
            let block = self.cov.columns(0, 3) * gx.transpose() + self.cov.columns(o, 2) * gm.transpose();
            pht.columns_mut(2 * i, 2).copy_from(&block);
            rows.push((o, gx, gm));
        }
        let mut s = DMatrix::zeros(2 * k, 2 * k);
        for (i, (o, gx, gm)) in rows.iter().enumerate() {
            let h_pht = gx * pht.rows(0, 3) + gm * pht.rows(*o, 2);
            s.rows_mut(2 * i, 2).copy_from(&h_pht);
            let mut diag = s.view_mut((2 * i, 2 * i), (2, 2));
            diag += r;
        }
        let s = (&s + s.transpose()) * 0.5;
        let chol = s
            .cholesky()
            .ok_or(SlamError::NotPositiveDefinite("joint innovation covariance"))?;
        let gain = chol.solve(&pht.transpose()).transpose();
        self.mean += &gain * innovation;
        self.mean[2] = wrap_angle(self.mean[2]);
        // P - K S K^T = P - K (P H^T)^T
        self.cov -= &gain * pht.transpose();
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        self.cov = sym;
        for (id, _) in matches {
            let b = self.blocks[id];
            self.observations[b] += 1;
        }
        Ok(())
    }

    /// Appends a landmark initialized from measurement `z` at the current
    /// pose, with cross-covariances through the pose; returns its id.
    pub fn augment(&mut self, z: &Vector2<f64>) -> Result<LandmarkId> {
        let pose = self.pose();
        let m = self.model.inverse(&pose, z)?;
        let (jp, jz) = self.model.inverse_jacobians(&pose, &m)?;
        let n = self.dim();
        let r = self.config.noise.measurement_cov();
        let cross = jp * self.cov.rows(0, 3);
        let block = jp * self.pose_cov() * jp.transpose() + jz * r * jz.transpose();

        let mut cov = std::mem::replace(&mut self.cov, DMatrix::zeros(0, 0)).resize(n + 2, n + 2, 0.0);
        cov.view_mut((n, 0), (2, n)).copy_from(&cross);
        cov.view_mut((0, n), (n, 2)).copy_from(&cross.transpose());
        cov.view_mut((n, n), (2, 2)).copy_from(&((block + block.transpose()) * 0.5));
        self.cov = cov;
        let mut mean = std::mem::replace(&mut self.mean, DVector::zeros(0)).resize_vertically(n + 2, 0.0);
        mean.fixed_rows_mut::<2>(n).copy_from(&m);
        self.mean = mean;

        let id = self.next_id;
        self.next_id += 1;
        self.blocks.insert(id, self.ids.len());
        self.ids.push(id);
        self.observations.push(1);
        Ok(id)
    }

    /// Predict, associate, update the matched landmarks jointly, then augment
    /// with new ones.
    pub fn step(&mut self, u: &ControlInput, dt: f64, z_batch: &[Measurement]) -> Result<StepResult> {
        let started = Instant::now();
        self.predict(u, dt)?;
        let zs: Vec<Vector2<f64>> = z_batch.iter().map(Measurement::to_vector).collect();
        let set = self.associate(&zs);
        let matches: Vec<(LandmarkId, Vector2<f64>)> = set.matched.iter().map(|&(id, k)| (id, zs[k])).collect();
        self.update_joint(&matches)?;
        let mut counts = AssociationCounts {
            matched: matches.len(),
            new: 0,
            discarded: set.discarded.len(),
        };
        for &k in &set.new_landmarks {
            match self.augment(&zs[k]) {
                Ok(_) => counts.new += 1,
                Err(SlamError::ZeroRange) => counts.discarded += 1,
                Err(e) => return Err(e),
            }
        }
        Ok(StepResult {
            estimated_pose: self.pose(),
            effective_sample_size: 1.0,
            resampled: false,
            step_time: started.elapsed().as_secs_f64(),
            association_counts: counts,
            divergences: 0,
        })
    }
}

/// Builds a filter pre-loaded with independent landmarks, for timing studies.
pub fn with_landmarks(config: FilterConfig, pose: Pose, landmarks: &[(Vector2<f64>, Matrix2<f64>)]) -> Result<EkfSlam> {
    let mut ekf = EkfSlam::new(config, pose)?;
    let n = 3 + 2 * landmarks.len();
    let mut mean = ekf.mean.clone().resize_vertically(n, 0.0);
    let mut cov = ekf.cov.clone().resize(n, n, 0.0);
    for (b, (m, c)) in landmarks.iter().enumerate() {
        mean.fixed_rows_mut::<2>(3 + 2 * b).copy_from(m);
        cov.fixed_view_mut::<2, 2>(3 + 2 * b, 3 + 2 * b).copy_from(c);
        ekf.blocks.insert(b as LandmarkId, b);
        ekf.ids.push(b as LandmarkId);
        ekf.observations.push(1);
    }
    ekf.next_id = landmarks.len() as LandmarkId;
    ekf.mean = mean;
    ekf.cov = cov;
    Ok(ekf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map_store::init_landmark;
    use crate::models::{AffineModel, VehicleParams};
    use approx::assert_relative_eq;
    use nalgebra::{Matrix2x3, Matrix3x2};
    use proptest::prelude::*;

    fn config() -> FilterConfig {
        FilterConfig::default()
    }

    #[test]
    fn zero_velocity_only_adds_regularizer() {
        let mut ekf = EkfSlam::new(config(), Pose::new(1.0, 2.0, 0.3)).unwrap();
        ekf.augment(&Vector2::new(5.0, 0.2)).unwrap();
        let before = ekf.clone();
        ekf.predict(&ControlInput::new(0.0, 0.2), 0.1).unwrap();
        assert_eq!(ekf.mean(), before.mean());
        // F_x = I and F_u Q F_u^T = 0 except for the (v) column, which is scaled by v = 0
        let (_, fu) = motion_jacobians(&before.pose(), &ControlInput::new(0.0, 0.2), &VehicleParams::default()).unwrap();
        let expected = before.pose_cov() + fu * config().noise.control_cov() * fu.transpose() + config().regularizer_matrix();
        assert_relative_eq!(ekf.pose_cov(), expected, epsilon = 1e-15);
        assert_eq!(ekf.cov().view((3, 3), (2, 2)), before.cov().view((3, 3), (2, 2)));
    }

    #[test]
    fn pose_only_prediction_matches_hand_ekf() {
        let cfg = config();
        let mut ekf = EkfSlam::new(cfg, Pose::new(0.0, 0.0, 0.5)).unwrap();
        let u = ControlInput::new(4.0, 0.1);
        ekf.predict(&u, 0.1).unwrap();
        // hand evaluation with a = b = 0
        let (s, c) = 0.5f64.sin_cos();
        let dt = 0.1;
        let l = cfg.vehicle.wheelbase;
        let tan = 0.1f64.tan();
        let fx = Matrix3::new(1.0, 0.0, -dt * 4.0 * s, 0.0, 1.0, dt * 4.0 * c, 0.0, 0.0, 1.0);
        let fu = Matrix3x2::new(dt * c, 0.0, dt * s, 0.0, dt * tan / l, dt * 4.0 / l * (1.0 + tan * tan));
        let p0 = cfg.regularizer_matrix();
        let expected = fx * p0 * fx.transpose() + fu * cfg.noise.control_cov() * fu.transpose() + p0;
        assert_relative_eq!(ekf.pose_cov(), expected, epsilon = 1e-14);
        assert_relative_eq!(ekf.mean()[0], dt * 4.0 * c, epsilon = 1e-15);
        assert_relative_eq!(ekf.mean()[1], dt * 4.0 * s, epsilon = 1e-15);
        assert_relative_eq!(ekf.mean()[2], 0.5 + dt * 4.0 / l * tan, epsilon = 1e-15);
    }

    #[test]
    fn prediction_leaves_landmark_blocks_alone() {
        let mut ekf = EkfSlam::new(config(), Pose::default()).unwrap();
        ekf.predict(&ControlInput::new(3.0, 0.1), 0.1).unwrap();
        ekf.augment(&Vector2::new(5.0, 0.2)).unwrap();
        ekf.augment(&Vector2::new(9.0, -0.7)).unwrap();
        let before = ekf.clone();
        ekf.predict(&ControlInput::new(3.0, -0.2), 0.1).unwrap();
        assert_eq!(ekf.cov().view((3, 3), (4, 4)), before.cov().view((3, 3), (4, 4)));
        assert_eq!(ekf.mean().rows(3, 4), before.mean().rows(3, 4));
    }

    #[test]
    fn augment_with_certain_pose_matches_single_landmark_init() {
        let mut cfg = config();
        cfg.regularizer = [0.0; 3];
        let pose = Pose::new(1.0, -1.0, 0.4);
        let mut ekf = EkfSlam::new(cfg, pose).unwrap();
        let z = Vector2::new(7.0, -0.3);
        let id = ekf.augment(&z).unwrap();
        assert_eq!(ekf.dim(), 5);
        assert_eq!(ekf.id_of(ekf.block_of(id).unwrap()), Some(id));
        let single = init_landmark(0, &pose, &z, &cfg.noise.measurement_cov(), &RangeBearing).unwrap();
        let got = ekf.landmark(0);
        assert_relative_eq!(got.mean, single.mean, epsilon = 1e-14);
        assert_relative_eq!(got.cov, single.cov, epsilon = 1e-14);
        assert_eq!(ekf.cov().view((0, 3), (3, 2)).amax(), 0.0);
        let id2 = ekf.augment(&Vector2::new(3.0, 1.0)).unwrap();
        assert_eq!(ekf.dim(), 7);
        assert_eq!(ekf.id_of(ekf.block_of(id2).unwrap()), Some(id2));
    }

    #[test]
    fn zero_innovation_update_contracts() {
        let mut ekf = EkfSlam::new(config(), Pose::default()).unwrap();
        ekf.predict(&ControlInput::new(3.0, 0.1), 0.1).unwrap();
        let id = ekf.augment(&Vector2::new(6.0, 0.3)).unwrap();
        ekf.predict(&ControlInput::new(3.0, 0.1), 0.1).unwrap();
        let before = ekf.clone();
        let z = RangeBearing.predict(&ekf.pose(), &ekf.landmark(0).mean).unwrap();
        ekf.update_joint(&[(id, z)]).unwrap();
        assert!((ekf.mean() - before.mean()).amax() < 1e-14);
        let diff = before.cov() - ekf.cov();
        assert!(diff.symmetric_eigen().eigenvalues.min() > -1e-10);
        assert!(ekf.covariance_is_spd());
        assert_eq!(ekf.landmark(0).observation_count, 2);
    }

    #[test]
    fn affine_joint_update_is_the_kalman_update() {
        let model = AffineModel {
            h_pose: Matrix2x3::new(-1.0, 0.2, 0.5, 0.1, -1.0, 2.0),
            h_landmark: Matrix2::new(1.0, -0.2, 0.0, 1.0),
            offset: Vector2::new(0.3, -0.1),
        };
        let cfg = config();
        let mut ekf = EkfSlam::with_model(cfg, Pose::default(), model).unwrap();
        ekf.predict(&ControlInput::new(2.0, 0.1), 0.1).unwrap();
        let id = ekf.augment(&Vector2::new(4.0, 1.0)).unwrap();
        ekf.predict(&ControlInput::new(2.0, 0.1), 0.1).unwrap();
        let x0 = ekf.mean().clone();
        let p0 = ekf.cov().clone();
        let z = Vector2::new(4.6, 0.2);
        ekf.update_joint(&[(id, z)]).unwrap();

        let mut h = DMatrix::zeros(2, 5);
        h.view_mut((0, 0), (2, 3)).copy_from(&model.h_pose);
        h.view_mut((0, 3), (2, 2)).copy_from(&model.h_landmark);
        let z_hat = &h * &x0 + DVector::from_column_slice(model.offset.as_slice());
        let s = &h * &p0 * h.transpose() + DMatrix::from_column_slice(2, 2, cfg.noise.measurement_cov().as_slice());
        let k = &p0 * h.transpose() * s.try_inverse().unwrap();
        let mean = &x0 + &k * (DVector::from_column_slice(z.as_slice()) - z_hat);
        let cov = (DMatrix::identity(5, 5) - &k * &h) * &p0;
        assert!((ekf.mean() - mean).amax() < 1e-10);
        assert!((ekf.cov() - cov).amax() < 1e-10);
    }

    #[test]
    fn step_builds_and_reuses_the_map() {
        let landmarks = [Vector2::new(10.0, 3.0), Vector2::new(12.0, -4.0), Vector2::new(20.0, 0.0)];
        let mut ekf = EkfSlam::new(config(), Pose::default()).unwrap();
        let mut truth = Pose::default();
        let u = ControlInput::new(2.0, 0.0);
        let mut total = AssociationCounts::default();
        for _ in 0..20 {
            truth = motion_step(&truth, &u, &VehicleParams::default()).unwrap();
            let zs: Vec<Measurement> = landmarks
                .iter()
                .map(|m| Measurement::from_vector(&RangeBearing.predict(&truth, m).unwrap()))
                .collect();
            let r = ekf.step(&u, 0.1, &zs).unwrap();
            total.matched += r.association_counts.matched;
            total.new += r.association_counts.new;
        }
        assert_eq!(total.new, 3);
        assert_eq!(total.matched, 57);
        assert!((ekf.pose().position() - truth.position()).norm() < 0.1);
        assert!(ekf.covariance_is_spd());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn covariance_stays_spd(
            controls in proptest::collection::vec((0.0..6.0f64, -0.4..0.4f64), 1..6),
            zs in proptest::collection::vec((1.0..30.0f64, -1.5..1.5f64), 1..5),
            noise in proptest::collection::vec((-0.5..0.5f64, -0.05..0.05f64), 5),
        ) {
            let mut ekf = EkfSlam::new(config(), Pose::default()).unwrap();
            for &(r, b) in &zs {
                ekf.augment(&Vector2::new(r, b)).unwrap();
            }
            for (v, a) in controls {
                ekf.predict(&ControlInput::new(v, a), 0.1).unwrap();
                prop_assert!(ekf.covariance_is_spd());
            }
            let matches: Vec<(LandmarkId, Vector2<f64>)> = (0..ekf.landmark_count())
                .map(|b| {
                    let z = RangeBearing.predict(&ekf.pose(), &ekf.landmark(b).mean).unwrap();
                    (b as LandmarkId, z + Vector2::new(noise[b].0, noise[b].1))
                })
                .collect();
            ekf.update_joint(&matches).unwrap();
            prop_assert!(ekf.covariance_is_spd());
            let c = ekf.cov();
            prop_assert!((c - c.transpose()).amax() == 0.0);
        }
    }
}
