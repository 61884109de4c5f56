//! Rao-Blackwellized particle filter.
//!
//! Each particle carries a sampled pose, the Gaussian it was drawn from, its
//! own landmark map and a log-weight. A step runs, independently per particle,
//! motion prediction, data association, the configured pose proposal,
//! sampling, landmark updates and weighting; normalization, estimate
//! extraction and resampling follow as a sequential barrier.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};
use crate::gaussian::Gaussian;
use crate::map_store::{
    associate, ekf_update, init_landmark, innovation_cov, AssociationSet, Gates, LandmarkEstimate,
    LandmarkMap,
};
use crate::models::{ControlInput, Measurement, MeasurementModel, Pose, RangeBearing, VehicleParams};
use crate::proposal::{predict_prior, solve, BatchItem, ProposalStrategy};

/// Standard deviations of control and measurement noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Velocity noise, m/s.
    pub sigma_v: f64,
    /// Steering noise, rad.
    pub sigma_g: f64,
    /// Range noise, m.
    pub sigma_r: f64,
    /// Bearing noise, rad.
    pub sigma_b: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_v: 2.0,
            sigma_g: 6f64.to_radians(),
            sigma_r: 1.0,
            sigma_b: 3f64.to_radians(),
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [
            ("sigma_v", self.sigma_v),
            ("sigma_g", self.sigma_g),
            ("sigma_r", self.sigma_r),
            ("sigma_b", self.sigma_b),
        ] {
            if !(s.is_finite() && s > 0.0) {
                return Err(SlamError::Config(format!("{name} must be positive (got {s})")));
            }
        }
        Ok(())
    }

    pub fn control_cov(&self) -> Matrix2<f64> {
        Matrix2::from_diagonal(&Vector2::new(self.sigma_v.powi(2), self.sigma_g.powi(2)))
    }

    pub fn measurement_cov(&self) -> Matrix2<f64> {
        Matrix2::from_diagonal(&Vector2::new(self.sigma_r.powi(2), self.sigma_b.powi(2)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimateRule {
    MaxWeight,
    WeightedMean,
}

/// How per-match likelihood factors combine into a particle's weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightForm {
    /// Product of the factors (sum of log-densities).
    Product,
    /// Sum of the factors.
    SumOfLikelihoods,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub particle_count: usize,
    pub proposal: ProposalStrategy,
    pub noise: NoiseConfig,
    pub gates: Gates,
    /// Resample when ESS falls below this fraction of the particle count.
    pub resample_threshold: f64,
    pub estimate_rule: EstimateRule,
    pub weight_form: WeightForm,
    /// Diagonal of the additive prior regularizer (m², m², rad²).
    pub regularizer: [f64; 3],
    /// Fixed extra radius, m, for the association candidate search.
    pub search_slack: f64,
    pub vehicle: VehicleParams,
    /// Keep each particle's full pose history.
    pub keep_trajectory: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            particle_count: 10,
            proposal: ProposalStrategy::default(),
            noise: NoiseConfig::default(),
            gates: Gates::default(),
            resample_threshold: 0.5,
            estimate_rule: EstimateRule::MaxWeight,
            weight_form: WeightForm::Product,
            regularizer: [1e-4, 1e-4, 1e-6],
            search_slack: 2.0,
            vehicle: VehicleParams::default(),
            keep_trajectory: false,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particle_count == 0 {
            return Err(SlamError::Config("particle_count must be at least 1".into()));
        }
        if !(self.resample_threshold > 0.0 && self.resample_threshold <= 1.0) {
            return Err(SlamError::Config(format!(
                "resample_threshold must lie in (0, 1] (got {})",
                self.resample_threshold
            )));
        }
        if self.regularizer.iter().any(|q| !(q.is_finite() && *q >= 0.0)) {
            return Err(SlamError::Config("regularizer entries must be non-negative".into()));
        }
        if !(self.search_slack.is_finite() && self.search_slack >= 0.0) {
            return Err(SlamError::Config("search_slack must be non-negative".into()));
        }
        self.proposal.validate()?;
        self.noise.validate()?;
        self.gates.validate()?;
        self.vehicle.validate()
    }

    pub fn regularizer_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.regularizer))
    }
}

/// Persistent pose history; clones share their common prefix.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    head: Option<Arc<TrajectoryNode>>,
    len: usize,
}

#[derive(Debug)]
struct TrajectoryNode {
    pose: Pose,
    prev: Option<Arc<TrajectoryNode>>,
}

impl Trajectory {
    pub fn push(&mut self, pose: Pose) {
        let prev = self.head.take();
        self.head = Some(Arc::new(TrajectoryNode { pose, prev }));
        self.len += 1;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Poses oldest first.
    pub fn to_vec(&self) -> Vec<Pose> {
        let mut out = Vec::with_capacity(self.len);
        let mut cursor = self.head.as_deref();
        while let Some(node) = cursor {
            out.push(node.pose);
            cursor = node.prev.as_deref();
        }
        out.reverse();
        out
    }
}

impl Drop for Trajectory {
    // unlink iteratively so long histories do not overflow the stack
    fn drop(&mut self) {
        let mut cursor = self.head.take();
        while let Some(node) = cursor {
            match Arc::try_unwrap(node) {
                Ok(mut owned) => cursor = owned.prev.take(),
                Err(_) => break,
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Particle {
    pub pose_sample: Pose,
    /// Distribution the current pose sample was drawn from.
    pub pose_gaussian: Gaussian,
    pub map: LandmarkMap,
    /// Normalized log-weight after each completed step.
    pub log_weight: f64,
    pub stream_id: u64,
    rng: ChaCha8Rng,
    pub trajectory: Option<Trajectory>,
}

fn particle_rng(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

impl Particle {
    fn new(pose: Pose, pose_gaussian: Gaussian, seed: u64, stream_id: u64, keep_trajectory: bool) -> Self {
        let trajectory = keep_trajectory.then(|| {
            let mut t = Trajectory::default();
            t.push(pose);
            t
        });
        Self {
            pose_sample: pose,
            pose_gaussian,
            map: LandmarkMap::new(),
            log_weight: 0.0,
            stream_id,
            rng: particle_rng(seed, stream_id),
            trajectory,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssociationCounts {
    pub matched: usize,
    pub new: usize,
    pub discarded: usize,
}

impl AssociationCounts {
    fn add(&mut self, other: &AssociationCounts) {
        self.matched += other.matched;
        self.new += other.new;
        self.discarded += other.discarded;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub estimated_pose: Pose,
    pub effective_sample_size: f64,
    pub resampled: bool,
    /// Wall-clock duration of the step, seconds.
    pub step_time: f64,
    /// Association outcomes summed over particles.
    pub association_counts: AssociationCounts,
    /// Particles whose proposal solver failed and fell back to the prior.
    pub divergences: usize,
}

/// Log importance weight of one particle.
///
/// `matches` pairs each associated measurement with the landmark estimate as
/// it stood before this step's update. Each factor is a Gaussian density of
/// the innovation at `pose_sample`, with covariance from [`innovation_cov`]
/// using `pose_cov`.
pub fn importance_log_weight<M: MeasurementModel + ?Sized>(
    pose_sample: &Pose,
    pose_cov: &Matrix3<f64>,
    matches: &[(&LandmarkEstimate, Vector2<f64>)],
    r: &Matrix2<f64>,
    form: WeightForm,
    model: &M,
) -> Result<f64> {
    if matches.is_empty() {
        return Ok(0.0);
    }
    let terms = matches
        .iter()
        .map(|(lm, z)| {
            let l = innovation_cov(lm, pose_cov, pose_sample, r, model)?;
            let nu = model.residual(z, &model.predict(pose_sample, &lm.mean)?);
            let chol = l
                .cholesky()
                .ok_or(SlamError::NotPositiveDefinite("innovation covariance"))?;
            let log_det = 2.0 * chol.l().diagonal().map(f64::ln).sum();
            let maha = nu.dot(&chol.solve(&nu));
            Ok(-0.5 * (maha + log_det + 2.0 * (2.0 * std::f64::consts::PI).ln()))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(match form {
        WeightForm::Product => terms.iter().sum(),
        WeightForm::SumOfLikelihoods => log_sum_exp(&terms),
    })
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights in place so that their exponentials sum to one and
/// returns the effective sample size `1 / sum(w^2)`.
pub fn normalize_log_weights(log_weights: &mut [f64]) -> f64 {
    let total = log_sum_exp(log_weights);
    if !total.is_finite() {
        // every weight underflowed or is invalid: fall back to uniform
        let uniform = -(log_weights.len() as f64).ln();
        log_weights.iter_mut().for_each(|w| *w = uniform);
    } else {
        log_weights.iter_mut().for_each(|w| *w -= total);
    }
    1.0 / log_weights.iter().map(|w| (2.0 * w).exp()).sum::<f64>()
}

/// Systematic resampling: parent index of every offspring for normalized
/// `weights`, using the single uniform draw `u` in `[0, 1)`.
pub fn systematic_indices(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cumulative = weights.first().copied().unwrap_or(0.0);
    let mut parent = 0;
    for k in 0..n {
        let position = (u + k as f64) / n as f64;
        while position >= cumulative && parent + 1 < n {
            parent += 1;
            cumulative += weights[parent];
        }
        out.push(parent);
    }
    out
}

/// Pose estimate from a weighted particle set; ties under `MaxWeight` go to
/// the lowest index.
pub fn extract_estimate(particles: &[Particle], rule: EstimateRule) -> Pose {
    let poses: Vec<Pose> = particles.iter().map(|p| p.pose_sample).collect();
    let log_weights: Vec<f64> = particles.iter().map(|p| p.log_weight).collect();
    estimate_from(&poses, &log_weights, rule)
}

fn estimate_from(poses: &[Pose], log_weights: &[f64], rule: EstimateRule) -> Pose {
    match rule {
        EstimateRule::MaxWeight => {
            let mut best = 0;
            for (i, w) in log_weights.iter().enumerate() {
                if *w > log_weights[best] {
                    best = i;
                }
            }
            poses[best]
        }
        EstimateRule::WeightedMean => {
            let mut w: Vec<f64> = log_weights.to_vec();
            normalize_log_weights(&mut w);
            let (mut x, mut y, mut s, mut c) = (0.0, 0.0, 0.0, 0.0);
            for (pose, lw) in poses.iter().zip(&w) {
                let wi = lw.exp();
                x += wi * pose.x;
                y += wi * pose.y;
                s += wi * pose.theta.sin();
                c += wi * pose.theta.cos();
            }
            Pose::new(x, y, s.atan2(c))
        }
    }
}

fn to_dmatrix3(m: &DMatrix<f64>) -> Matrix3<f64> {
    Matrix3::from_iterator(m.iter().copied())
}

struct ParticleOutcome {
    counts: AssociationCounts,
    diverged: bool,
}

struct StepContext<'a, M: ?Sized> {
    u: &'a ControlInput,
    params: VehicleParams,
    control_cov: Matrix2<f64>,
    r: Matrix2<f64>,
    regularizer: Matrix3<f64>,
    zs: &'a [Vector2<f64>],
    cfg: &'a FilterConfig,
    model: &'a M,
}

fn advance_particle<M: MeasurementModel + ?Sized>(
    p: &mut Particle,
    ctx: &StepContext<'_, M>,
) -> Result<ParticleOutcome> {
    let cfg = ctx.cfg;
    let prior = predict_prior(&p.pose_sample, ctx.u, &ctx.control_cov, &ctx.params, &ctx.regularizer, &cfg.proposal.ut)?;
    let prior_cov = to_dmatrix3(&prior.cov);
    let prior_point = Pose::new(prior.mean[0], prior.mean[1], prior.mean[2]);
    let set: AssociationSet = associate(
        &p.map,
        &prior_cov,
        &prior_point,
        ctx.zs,
        &ctx.r,
        &cfg.gates,
        cfg.search_slack,
        ctx.model,
    );
    let matched: Vec<(LandmarkEstimate, Vector2<f64>)> = set
        .matched
        .iter()
        .map(|&(id, k)| (p.map.get(id).expect("associated landmark exists").clone(), ctx.zs[k]))
        .collect();
    let batch: Vec<BatchItem> = matched
        .iter()
        .map(|(lm, z)| BatchItem {
            z: *z,
            landmark_mean: lm.mean,
            landmark_cov: lm.cov,
        })
        .collect();

    let (proposal, diverged) = match solve(&cfg.proposal, &prior, &batch, &ctx.r, ctx.model) {
        Ok(g) => (g, false),
        Err(SlamError::Divergence(_) | SlamError::NotPositiveDefinite(_)) => (prior, true),
        Err(e) => return Err(e),
    };
    let draw = proposal.sample(&mut p.rng)?;
    let pose = Pose::new(draw[0], draw[1], draw[2]);

    let pose_cov = to_dmatrix3(&proposal.cov);
    let refs: Vec<(&LandmarkEstimate, Vector2<f64>)> = matched.iter().map(|(lm, z)| (lm, *z)).collect();
    let log_w = importance_log_weight(&pose, &pose_cov, &refs, &ctx.r, cfg.weight_form, ctx.model)?;

    let mut counts = AssociationCounts {
        matched: matched.len(),
        new: 0,
        discarded: set.discarded.len(),
    };
    for (lm, z) in &matched {
        let updated = ekf_update(lm, &pose, z, &ctx.r, ctx.model)?;
        p.map.update(updated);
    }
    for &k in &set.new_landmarks {
        match init_landmark(p.map.next_id(), &pose, &ctx.zs[k], &ctx.r, ctx.model) {
            Ok(lm) => {
                p.map.insert_new(lm);
                counts.new += 1;
            }
            // a zero-range detection cannot seed a landmark
            Err(SlamError::ZeroRange) => counts.discarded += 1,
            Err(e) => return Err(e),
        }
    }

    p.pose_sample = pose;
    p.pose_gaussian = proposal;
    p.log_weight += log_w;
    if let Some(t) = p.trajectory.as_mut() {
        t.push(pose);
    }
    Ok(ParticleOutcome { counts, diverged })
}

/// The particle set plus everything needed to advance it deterministically.
#[derive(Debug, Clone)]
pub struct ParticleFilter<M = RangeBearing> {
    config: FilterConfig,
    particles: Vec<Particle>,
    model: M,
    seed: u64,
    resample_rng: ChaCha8Rng,
    next_stream: u64,
    steps: usize,
    total_divergences: usize,
}

// stream reserved for the resampling draw; particle streams count up from 0
const RESAMPLE_STREAM: u64 = u64::MAX;

impl ParticleFilter<RangeBearing> {
    pub fn new(config: FilterConfig, initial_pose: Pose, seed: u64) -> Result<Self> {
        Self::with_model(config, initial_pose, seed, RangeBearing)
    }
}

impl<M: MeasurementModel> ParticleFilter<M> {
    /// All particles start at `initial_pose`; the start pose anchors the map frame.
    pub fn with_model(config: FilterConfig, initial_pose: Pose, seed: u64, model: M) -> Result<Self> {
        config.validate()?;
        let n = config.particle_count;
        let start = Gaussian::new(
            DVector::from_column_slice(initial_pose.to_vector().as_slice()),
            DMatrix::from_diagonal(&DVector::from_column_slice(&config.regularizer)),
        )?;
        let uniform = -(n as f64).ln();
        let particles = (0..n as u64)
            .map(|i| {
                let mut p = Particle::new(initial_pose, start.clone(), seed, i, config.keep_trajectory);
                p.log_weight = uniform;
                p
            })
            .collect();
        Ok(Self {
            config,
            particles,
            model,
            seed,
            resample_rng: particle_rng(seed, RESAMPLE_STREAM),
            next_stream: n as u64,
            steps: 0,
            total_divergences: 0,
        })
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn total_divergences(&self) -> usize {
        self.total_divergences
    }

    pub fn estimate(&self) -> Pose {
        extract_estimate(&self.particles, self.config.estimate_rule)
    }

    /// Particle with the largest weight (lowest index on ties).
    pub fn best_particle(&self) -> &Particle {
        let mut best = 0;
        for (i, p) in self.particles.iter().enumerate() {
            if p.log_weight > self.particles[best].log_weight {
                best = i;
            }
        }
        &self.particles[best]
    }

    /// Advances every particle by control `u` over `dt` seconds and
    /// incorporates the measurement batch `z_batch` observed at the new time.
    pub fn step(&mut self, u: &ControlInput, dt: f64, z_batch: &[Measurement]) -> Result<StepResult> {
        let started = Instant::now();
        let params = self.config.vehicle.with_dt(dt);
        params.validate()?;
        let zs: Vec<Vector2<f64>> = z_batch.iter().map(Measurement::to_vector).collect();
        let ctx = StepContext {
            u,
            params,
            control_cov: self.config.noise.control_cov(),
            r: self.config.noise.measurement_cov(),
            regularizer: self.config.regularizer_matrix(),
            zs: &zs,
            cfg: &self.config,
            model: &self.model,
        };
        let outcomes = self
            .particles
            .par_iter_mut()
            .map(|p| advance_particle(p, &ctx))
            .collect::<Result<Vec<_>>>()?;

        let mut counts = AssociationCounts::default();
        let mut divergences = 0;
        for o in &outcomes {
            counts.add(&o.counts);
            divergences += o.diverged as usize;
        }
        self.total_divergences += divergences;

        let mut log_weights: Vec<f64> = self.particles.iter().map(|p| p.log_weight).collect();
        let ess = normalize_log_weights(&mut log_weights);
        for (p, w) in self.particles.iter_mut().zip(&log_weights) {
            p.log_weight = *w;
        }
        let estimated_pose = self.estimate();

        let n = self.particles.len();
        let resampled = ess < self.config.resample_threshold * n as f64;
        if resampled {
            self.resample();
        }
        self.steps += 1;
        Ok(StepResult {
            estimated_pose,
            effective_sample_size: if resampled { n as f64 } else { ess },
            resampled,
            step_time: started.elapsed().as_secs_f64(),
            association_counts: counts,
            divergences,
        })
    }

    fn resample(&mut self) {
        let n = self.particles.len();
        let weights: Vec<f64> = self.particles.iter().map(|p| p.log_weight.exp()).collect();
        let u: f64 = self.resample_rng.random();
        let parents = systematic_indices(&weights, u);
        let uniform = -(n as f64).ln();
        self.particles = parents
            .iter()
            .map(|&i| {
                // maps and histories are shared, not copied
                let mut child = self.particles[i].clone();
                child.stream_id = self.next_stream;
                child.rng = particle_rng(self.seed, self.next_stream);
                child.log_weight = uniform;
                self.next_stream += 1;
                child
            })
            .collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{predict_measurement, AffineModel, Landmark};
    use crate::proposal::ProposalKind;
    use approx::assert_relative_eq;
    use nalgebra::Matrix2x3;
    use proptest::prelude::*;

    fn particle_at(pose: Pose, log_weight: f64) -> Particle {
        let g = Gaussian::new(DVector::from_column_slice(pose.to_vector().as_slice()), DMatrix::identity(3, 3)).unwrap();
        let mut p = Particle::new(pose, g, 0, 0, false);
        p.log_weight = log_weight;
        p
    }

    fn offspring_counts(parents: &[usize], n: usize) -> Vec<usize> {
        let mut c = vec![0; n];
        for &i in parents {
            c[i] += 1;
        }
        c
    }

    #[test]
    fn systematic_uniform_keeps_everyone_once() {
        let w = vec![0.2; 5];
        for u in [1e-6, 0.3, 0.999] {
            assert_eq!(systematic_indices(&w, u), vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn systematic_degenerate_copies_the_winner() {
        let w = vec![0.0, 0.0, 1.0, 0.0];
        for u in [0.0, 0.5, 0.999] {
            assert_eq!(systematic_indices(&w, u), vec![2; 4]);
        }
    }

    #[test]
    fn systematic_half_quarter_quarter_over_all_draws() {
        // N = 4 offspring over three parents: positions (u + k) / 4 fall in
        // [0, .5) twice, [.5, .75) once and [.75, 1) once for every u in [0, 1)
        let n = 4;
        for i in 0..1000 {
            let u = i as f64 / 1000.0;
            let positions: Vec<f64> = (0..n).map(|k| (u + k as f64) / n as f64).collect();
            let mut parents = Vec::new();
            for pos in positions {
                let parent = if pos < 0.5 { 0 } else if pos < 0.75 { 1 } else { 2 };
                parents.push(parent);
            }
            let oracle = offspring_counts(&parents, 3);
            assert_eq!(oracle, vec![2, 1, 1]);
            let padded = [0.5, 0.25, 0.25, 0.0];
            assert_eq!(offspring_counts(&systematic_indices(&padded, u), 4), vec![2, 1, 1, 0]);
        }
    }

    #[test]
    fn estimate_rules() {
        let single = vec![particle_at(Pose::new(1.0, 2.0, 0.3), 0.0)];
        assert_eq!(extract_estimate(&single, EstimateRule::MaxWeight), single[0].pose_sample);
        assert_eq!(extract_estimate(&single, EstimateRule::WeightedMean).x, 1.0);

        let tied = vec![
            particle_at(Pose::new(1.0, 0.0, 0.0), -(2f64).ln()),
            particle_at(Pose::new(2.0, 0.0, 0.0), -(2f64).ln()),
        ];
        assert_eq!(extract_estimate(&tied, EstimateRule::MaxWeight).x, 1.0);

        let wrapped = vec![
            particle_at(Pose::new(0.0, 0.0, 3.0), 0.25f64.ln()),
            particle_at(Pose::new(4.0, 0.0, -3.0), 0.75f64.ln()),
        ];
        let est = extract_estimate(&wrapped, EstimateRule::WeightedMean);
        let s = 0.25 * 3f64.sin() + 0.75 * (-3f64).sin();
        let c = 0.25 * 3f64.cos() + 0.75 * (-3f64).cos();
        assert_relative_eq!(est.theta, s.atan2(c), epsilon = 1e-15);
        // the arithmetic mean would be -1.5 rad; the circular one stays near pi
        assert!(est.theta.abs() > 3.0);
        assert_relative_eq!(est.x, 3.0, epsilon = 1e-15);
    }

    fn r_default() -> Matrix2<f64> {
        NoiseConfig::default().measurement_cov()
    }

    #[test]
    fn weight_of_a_zero_innovation_match() {
        let lm = LandmarkEstimate { id: 0, mean: Vector2::new(6.0, 2.0), cov: Matrix2::identity() * 0.1, observation_count: 1 };
        let pose = Pose::new(0.5, -0.5, 0.2);
        let p = Matrix3::identity() * 0.01;
        let z = RangeBearing.predict(&pose, &lm.mean).unwrap();
        let w = importance_log_weight(&pose, &p, &[(&lm, z)], &r_default(), WeightForm::Product, &RangeBearing).unwrap();
        let l = innovation_cov(&lm, &p, &pose, &r_default(), &RangeBearing).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI * l).determinant().ln();
        assert_relative_eq!(w, expected, epsilon = 1e-12);
    }

    #[test]
    fn weight_of_two_matches_is_the_sum_of_singles() {
        let a = LandmarkEstimate { id: 0, mean: Vector2::new(6.0, 2.0), cov: Matrix2::identity() * 0.1, observation_count: 1 };
        let b = LandmarkEstimate { id: 1, mean: Vector2::new(-3.0, 7.0), cov: Matrix2::identity() * 0.3, observation_count: 4 };
        let pose = Pose::new(0.0, 0.0, 0.4);
        let p = Matrix3::identity() * 0.02;
        let za = Vector2::new(6.5, 0.0);
        let zb = Vector2::new(7.0, 1.5);
        let r = r_default();
        let single = |lm: &LandmarkEstimate, z| importance_log_weight(&pose, &p, &[(lm, z)], &r, WeightForm::Product, &RangeBearing).unwrap();
        let both = importance_log_weight(&pose, &p, &[(&a, za), (&b, zb)], &r, WeightForm::Product, &RangeBearing).unwrap();
        assert_relative_eq!(both, single(&a, za) + single(&b, zb), epsilon = 1e-12);
        let summed = importance_log_weight(&pose, &p, &[(&a, za), (&b, zb)], &r, WeightForm::SumOfLikelihoods, &RangeBearing).unwrap();
        assert_relative_eq!(summed, (single(&a, za).exp() + single(&b, zb).exp()).ln(), epsilon = 1e-12);
        assert_eq!(importance_log_weight(&pose, &p, &[], &r, WeightForm::Product, &RangeBearing).unwrap(), 0.0);
    }

    fn reference_config(kind: ProposalKind, n: usize) -> FilterConfig {
        FilterConfig {
            particle_count: n,
            proposal: ProposalStrategy::new(kind),
            ..FilterConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(FilterConfig::default().validate().is_ok());
        let bad = |f: fn(&mut FilterConfig)| {
            let mut c = FilterConfig::default();
            f(&mut c);
            matches!(c.validate(), Err(SlamError::Config(_)))
        };
        assert!(bad(|c| c.particle_count = 0));
        assert!(bad(|c| c.resample_threshold = 0.0));
        assert!(bad(|c| c.resample_threshold = 1.5));
        assert!(bad(|c| c.noise.sigma_r = 0.0));
        assert!(bad(|c| c.gates.chi2_new = 1.0));
        assert!(bad(|c| c.proposal.max_iters = 0));
    }

    #[test]
    fn empty_batches_leave_weights_alone() {
        let mut f = ParticleFilter::new(reference_config(ProposalKind::NaturalGradient, 6), Pose::default(), 3).unwrap();
        for _ in 0..5 {
            let r = f.step(&ControlInput::new(3.0, 0.05), 0.1, &[]).unwrap();
            assert!(!r.resampled);
            assert_relative_eq!(r.effective_sample_size, 6.0, epsilon = 1e-9);
            assert_eq!(r.association_counts, AssociationCounts::default());
            assert_eq!(r.estimated_pose, f.particles()[0].pose_sample);
        }
        for p in f.particles() {
            assert_relative_eq!(p.log_weight, -(6f64).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn single_particle_affine_step_is_a_kalman_step() {
        // landmark-relative affine sensor: z = Hx x + Hm m + c
        let model = AffineModel {
            h_pose: Matrix2x3::new(-1.0, 0.2, 0.5, 0.1, -1.0, 2.0),
            h_landmark: Matrix2::new(1.0, -0.2, 0.0, 1.0),
            offset: Vector2::new(0.3, -0.1),
        };
        let mut cfg = reference_config(ProposalKind::NaturalGradient, 1);
        cfg.proposal.expectation = crate::proposal::ExpectationMode::MeanOnly;
        cfg.noise = NoiseConfig { sigma_v: 0.5, sigma_g: 0.05, sigma_r: 0.7, sigma_b: 0.4 };
        let mut f = ParticleFilter::with_model(cfg, Pose::default(), 11, model).unwrap();
        let lm = LandmarkEstimate { id: 0, mean: Vector2::new(5.0, 1.0), cov: Matrix2::new(0.3, 0.05, 0.05, 0.2), observation_count: 1 };
        f.particles[0].map.insert(lm.clone());
        let u = ControlInput::new(2.0, 0.1);
        let r = cfg.noise.measurement_cov();
        let prior = predict_prior(&Pose::default(), &u, &cfg.noise.control_cov(), &cfg.vehicle, &cfg.regularizer_matrix(), &cfg.proposal.ut).unwrap();
        let x0 = Vector3::new(prior.mean[0], prior.mean[1], prior.mean[2]);
        let p0 = to_dmatrix3(&prior.cov);
        // measurement a little off the prediction so the update is non-trivial
        let z = model.h_pose * x0 + model.h_landmark * lm.mean + model.offset + Vector2::new(0.4, -0.3);
        let step = f.step(&u, cfg.vehicle.dt, &[Measurement::new(z[0], z[1])]).unwrap();
        assert_eq!(step.association_counts.matched, 1);

        // pose posterior with the landmark at its mean and noise R
        let h = model.h_pose;
        let s = h * p0 * h.transpose() + r;
        let k = p0 * h.transpose() * s.try_inverse().unwrap();
        let mean = x0 + k * (z - (h * x0 + model.h_landmark * lm.mean + model.offset));
        let cov = (Matrix3::identity() - k * h) * p0;
        let particle = &f.particles()[0];
        let got_mean = Vector3::new(particle.pose_gaussian.mean[0], particle.pose_gaussian.mean[1], particle.pose_gaussian.mean[2]);
        assert!((got_mean - mean).amax() < 1e-10);
        assert!((to_dmatrix3(&particle.pose_gaussian.cov) - cov).amax() < 1e-10);

        // landmark update at the sampled pose
        let xs = particle.pose_sample.to_vector();
        let hm = model.h_landmark;
        let sl = hm * lm.cov * hm.transpose() + r;
        let kl = lm.cov * hm.transpose() * sl.try_inverse().unwrap();
        let nu = z - (h * xs + hm * lm.mean + model.offset);
        let updated = particle.map.get(0).unwrap();
        assert!((updated.mean - (lm.mean + kl * nu)).amax() < 1e-10);
        assert!((updated.cov - (Matrix2::identity() - kl * hm) * lm.cov).amax() < 1e-10);
        assert_eq!(updated.observation_count, 2);
        // one particle: its normalized weight is exactly 1
        assert_eq!(particle.log_weight, 0.0);
    }

    fn ring_world() -> Vec<Vector2<f64>> {
        (0..12)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / 12.0;
                Vector2::new(15.0 * a.cos(), 15.0 * a.sin() + 10.0)
            })
            .collect()
    }

    fn run_ring(kind: ProposalKind, seed: u64, steps: usize) -> Vec<StepResult> {
        let landmarks = ring_world();
        let mut f = ParticleFilter::new(reference_config(kind, 8), Pose::default(), seed).unwrap();
        let mut truth = Pose::default();
        let u = ControlInput::new(5.0, 0.3);
        let mut out = Vec::new();
        for _ in 0..steps {
            truth = crate::models::motion_step(&truth, &u, &f.config().vehicle).unwrap();
            let zs: Vec<Measurement> = landmarks
                .iter()
                .filter_map(|m| predict_measurement(&truth, &Landmark::new(m.x, m.y)).ok())
                .filter(|z| z.range < 20.0 && z.bearing.abs() < std::f64::consts::FRAC_PI_2)
                .collect();
            out.push(f.step(&ControlInput::new(5.2, 0.28), 0.1, &zs).unwrap());
        }
        out
    }

    fn strip_time(results: &[StepResult]) -> Vec<StepResult> {
        results.iter().map(|r| StepResult { step_time: 0.0, ..r.clone() }).collect()
    }

    #[test]
    fn runs_are_reproducible_across_thread_counts() {
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| run_ring(ProposalKind::NaturalGradient, 5, 60));
        let b = four.install(|| run_ring(ProposalKind::NaturalGradient, 5, 60));
        assert_eq!(strip_time(&a), strip_time(&b));
        let c = run_ring(ProposalKind::NaturalGradient, 6, 60);
        assert_ne!(strip_time(&a), strip_time(&c));
    }

    #[test]
    fn filter_invariants_along_a_run() {
        for kind in [ProposalKind::PriorOnly, ProposalKind::Unscented, ProposalKind::NaturalGradient] {
            let results = run_ring(kind, 9, 80);
            let mut matched = 0;
            for r in &results {
                assert!(r.effective_sample_size >= 1.0 - 1e-9 && r.effective_sample_size <= 8.0 + 1e-9);
                if r.resampled {
                    assert_eq!(r.effective_sample_size, 8.0);
                }
                matched += r.association_counts.matched;
            }
            assert!(matched > 0, "{kind:?} never re-observed a landmark");
        }
    }

    #[test]
    fn resampling_shares_maps() {
        let mut f = ParticleFilter::new(reference_config(ProposalKind::NaturalGradient, 4), Pose::default(), 1).unwrap();
        let z = [Measurement::new(10.0, 0.2), Measurement::new(12.0, -0.4)];
        f.step(&ControlInput::new(1.0, 0.0), 0.1, &z).unwrap();
        for p in &mut f.particles {
            p.log_weight = f64::NEG_INFINITY;
        }
        f.particles[2].log_weight = 0.0;
        let before = f.particles[2].map.clone();
        f.resample();
        let ids: Vec<u64> = f.particles.iter().map(|p| p.stream_id).collect();
        assert_eq!(ids, vec![4, 5, 6, 7]);
        for p in &f.particles {
            assert_eq!(p.map.shared_records(&before), before.len());
            assert_relative_eq!(p.log_weight, -(4f64).ln(), epsilon = 1e-15);
        }
    }

    #[test]
    fn trajectory_keeps_history_and_shares_prefix() {
        let mut cfg = reference_config(ProposalKind::PriorOnly, 3);
        cfg.keep_trajectory = true;
        let mut f = ParticleFilter::new(cfg, Pose::default(), 2).unwrap();
        for _ in 0..10 {
            f.step(&ControlInput::new(2.0, 0.0), 0.1, &[]).unwrap();
        }
        let t = f.particles()[1].trajectory.as_ref().unwrap();
        assert_eq!(t.len(), 11);
        let poses = t.to_vec();
        assert_eq!(poses[0], Pose::default());
        assert_eq!(*poses.last().unwrap(), f.particles()[1].pose_sample);
    }

    #[test]
    fn invalid_step_inputs_are_rejected() {
        let mut f = ParticleFilter::new(reference_config(ProposalKind::NaturalGradient, 2), Pose::default(), 0).unwrap();
        assert!(matches!(f.step(&ControlInput::new(1.0, 0.0), 0.0, &[]), Err(SlamError::Config(_))));
        assert!(matches!(
            f.step(&ControlInput::new(1.0, 2.0), 0.1, &[]),
            Err(SlamError::InvalidSteering(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn normalized_weights_sum_to_one(ws in proptest::collection::vec(-800.0..50.0f64, 1..64)) {
            let mut w = ws.clone();
            let ess = normalize_log_weights(&mut w);
            let total: f64 = w.iter().map(|x| x.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(ess >= 1.0 - 1e-9 && ess <= w.len() as f64 + 1e-9);
        }

        #[test]
        fn systematic_offspring_within_one_of_expectation(
            raw in proptest::collection::vec(0.0..1.0f64, 1..40),
            u in 0.0..1.0f64,
        ) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-6);
            let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let n = w.len();
            let parents = systematic_indices(&w, u);
            prop_assert_eq!(parents.len(), n);
            prop_assert!(parents.windows(2).all(|p| p[0] <= p[1]));
            let counts = offspring_counts(&parents, n);
            for (c, wi) in counts.iter().zip(&w) {
                prop_assert!((*c as f64 - n as f64 * wi).abs() < 1.0 + 1e-9);
            }
        }

        #[test]
        fn weighted_mean_heading_is_wrapped(
            thetas in proptest::collection::vec(-3.1..3.1f64, 1..8),
            raw in proptest::collection::vec(0.01..1.0f64, 8),
        ) {
            let particles: Vec<Particle> = thetas
                .iter()
                .zip(&raw)
                .map(|(t, w)| particle_at(Pose::new(0.0, 0.0, *t), w.ln()))
                .collect();
            let est = extract_estimate(&particles, EstimateRule::WeightedMean);
            prop_assert!(est.theta > -std::f64::consts::PI && est.theta <= std::f64::consts::PI);
        }
    }
}
