//! Synthetic worlds with ground truth.
//!
//! The vehicle follows a scripted control sequence exactly; the emitted
//! event stream carries noisy encoder/steering readings and noisy
//! range-bearing detections of every landmark inside the sensor's field of
//! view and range.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_eval::events::{EventKind, SensorEvent};
use crate::error::{Result, SlamError};
use crate::models::{
    encoder_velocity, motion_step, predict_measurement, wrap_angle, ControlInput, Landmark, Measurement, Pose,
    VehicleParams,
};
use crate::rbpf::NoiseConfig;

// stream reserved for world generation, distinct from every filter stream
const WORLD_STREAM: u64 = u64::MAX - 1;

// noisy steering is clamped here so every emitted control stays valid
const MAX_STEER: f64 = 1.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkLayout {
    /// `count` landmarks uniformly in the box `[min, max]`.
    Uniform { count: usize, min: [f64; 2], max: [f64; 2] },
    Explicit(Vec<[f64; 2]>),
}

/// Constant control held for `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlSegment {
    pub v: f64,
    pub alpha: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub landmarks: LandmarkLayout,
    pub script: Vec<ControlSegment>,
    pub noise: NoiseConfig,
    /// Total angular width of the sensor's field of view, rad.
    pub fov: f64,
    pub max_range: f64,
    pub seed: u64,
    pub dt: f64,
    pub vehicle: VehicleParams,
    pub start: Pose,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self::loop_world(40, 500, 0)
    }
}

impl WorldConfig {
    /// Three laps of a circle driven at 3 m/s over `steps` intervals of
    /// 0.25 s, with `count` landmarks scattered around it, at the reference
    /// noise levels.
    pub fn loop_world(count: usize, steps: usize, seed: u64) -> Self {
        let vehicle = VehicleParams::default();
        let dt = 0.25;
        let v = 3.0;
        let laps = 3.0;
        let duration = steps as f64 * dt / laps;
        let turn_rate = std::f64::consts::TAU / duration;
        let alpha = (turn_rate * vehicle.wheelbase / v).atan();
        let radius = v / turn_rate;
        let margin = 10.0;
        Self {
            landmarks: LandmarkLayout::Uniform {
                count,
                min: [-radius - margin, -margin],
                max: [radius + margin, 2.0 * radius + margin],
            },
            script: vec![ControlSegment { v, alpha, steps }],
            noise: NoiseConfig::default(),
            fov: std::f64::consts::PI,
            max_range: 30.0,
            seed,
            dt,
            vehicle,
            start: Pose::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov > 0.0 && self.fov <= std::f64::consts::TAU) {
            return Err(SlamError::Config(format!("fov must lie in (0, 2pi] (got {})", self.fov)));
        }
        if !(self.max_range > 0.0) {
            return Err(SlamError::Config("max_range must be positive".into()));
        }
        if !(self.dt > 0.0) {
            return Err(SlamError::Config("dt must be positive".into()));
        }
        for seg in &self.script {
            if !(seg.alpha.abs() < MAX_STEER) {
                return Err(SlamError::Config(format!("scripted steering {} exceeds {MAX_STEER} rad", seg.alpha)));
            }
        }
        if let LandmarkLayout::Uniform { min, max, .. } = &self.landmarks {
            if !(min[0] <= max[0] && min[1] <= max[1]) {
                return Err(SlamError::Config("landmark box min exceeds max".into()));
            }
        }
        self.noise.validate()?;
        self.vehicle.validate()
    }

    pub fn total_steps(&self) -> usize {
        self.script.iter().map(|s| s.steps).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedRun {
    pub events: Vec<SensorEvent>,
    /// `(time, true pose)` at the start and after every step.
    pub truth: Vec<(f64, Pose)>,
    pub landmarks: Vec<Landmark>,
}

/// Detections of `landmarks` from `pose`, noise free, in landmark order.
pub fn visible(pose: &Pose, landmarks: &[Landmark], fov: f64, max_range: f64) -> Vec<Measurement> {
    landmarks
        .iter()
        .filter_map(|m| predict_measurement(pose, m).ok())
        .filter(|z| z.range <= max_range && z.bearing.abs() <= 0.5 * fov)
        .collect()
}

/// Runs the world. The stream starts with a control at t = 0; each step
/// then emits, at its end time, the detections, a GPS fix, and the next
/// control.
pub fn simulate(cfg: &WorldConfig) -> Result<SimulatedRun> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(WORLD_STREAM);
    let landmarks: Vec<Landmark> = match &cfg.landmarks {
        LandmarkLayout::Uniform { count, min, max } => (0..*count)
            .map(|_| {
                Landmark::new(
                    min[0] + (max[0] - min[0]) * rng.random::<f64>(),
                    min[1] + (max[1] - min[1]) * rng.random::<f64>(),
                )
            })
            .collect(),
        LandmarkLayout::Explicit(list) => list.iter().map(|p| Landmark::new(p[0], p[1])).collect(),
    };
    let noise = |sigma: f64| Normal::new(0.0, sigma).map_err(|e| SlamError::Config(e.to_string()));
    let (nv, ng, nr, nb) = (
        noise(cfg.noise.sigma_v)?,
        noise(cfg.noise.sigma_g)?,
        noise(cfg.noise.sigma_r)?,
        noise(cfg.noise.sigma_b)?,
    );
    let params = cfg.vehicle.with_dt(cfg.dt);
    let controls: Vec<ControlInput> = cfg
        .script
        .iter()
        .flat_map(|s| std::iter::repeat_n(ControlInput::new(s.v, s.alpha), s.steps))
        .collect();

    let noisy_control = |u: &ControlInput, rng: &mut ChaCha8Rng| {
        let v = u.v + nv.sample(rng);
        let alpha = (u.alpha + ng.sample(rng)).clamp(-MAX_STEER, MAX_STEER);
        EventKind::Control {
            v_e: encoder_velocity(v, alpha, &params),
            alpha,
        }
    };

    let mut pose = cfg.start;
    let mut time = 0.0;
    let mut events = Vec::new();
    let mut truth = vec![(time, pose)];
    if let Some(first) = controls.first() {
        events.push(SensorEvent { time, kind: noisy_control(first, &mut rng) });
    }
    for (k, u) in controls.iter().enumerate() {
        pose = motion_step(&pose, u, &params)?;
        time = (k + 1) as f64 * cfg.dt;
        truth.push((time, pose));
        let zs: Vec<Measurement> = visible(&pose, &landmarks, cfg.fov, cfg.max_range)
            .into_iter()
            .map(|z| Measurement::new((z.range + nr.sample(&mut rng)).max(0.0), wrap_angle(z.bearing + nb.sample(&mut rng))))
            .collect();
        events.push(SensorEvent { time, kind: EventKind::Measurements(zs) });
        events.push(SensorEvent { time, kind: EventKind::GroundTruth { x: pose.x, y: pose.y } });
        if let Some(next) = controls.get(k + 1) {
            events.push(SensorEvent { time, kind: noisy_control(next, &mut rng) });
        }
    }
    Ok(SimulatedRun { events, truth, landmarks })
}
