//! Replays an event stream through a filter and pairs the estimates with
//! ground truth.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data_eval::events::{EventKind, SensorEvent};
use crate::data_eval::record::{RunMeta, RunRecord, RunRow};
use crate::ekf_slam::EkfSlam;
use crate::error::{Result, SlamError};
use crate::models::{axle_velocity, ControlInput, Measurement, MeasurementModel, Pose, VehicleParams};
use crate::proposal::ProposalKind;
use crate::rbpf::{FilterConfig, ParticleFilter, StepResult};

/// Interval used when a measurement batch shares the timestamp of the
/// previous filter step.
pub const MIN_STEP_DT: f64 = 1e-6;

/// Common interface of the particle filter and the EKF baseline.
pub trait SlamFilter {
    fn step(&mut self, u: &ControlInput, dt: f64, z_batch: &[Measurement]) -> Result<StepResult>;
    fn landmark_count(&self) -> usize;
    fn total_divergences(&self) -> usize;
}

impl<M: MeasurementModel> SlamFilter for ParticleFilter<M> {
    fn step(&mut self, u: &ControlInput, dt: f64, z_batch: &[Measurement]) -> Result<StepResult> {
        ParticleFilter::step(self, u, dt, z_batch)
    }

    fn landmark_count(&self) -> usize {
        self.best_particle().map.len()
    }

    fn total_divergences(&self) -> usize {
        ParticleFilter::total_divergences(self)
    }
}

impl<M: MeasurementModel> SlamFilter for EkfSlam<M> {
    fn step(&mut self, u: &ControlInput, dt: f64, z_batch: &[Measurement]) -> Result<StepResult> {
        EkfSlam::step(self, u, dt, z_batch)
    }

    fn landmark_count(&self) -> usize {
        EkfSlam::landmark_count(self)
    }

    fn total_divergences(&self) -> usize {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayOptions {
    /// Largest time gap, s, at which a GPS fix is paired with a step.
    pub gt_tolerance: f64,
    /// Record wall-clock step times; when off they are written as zero so
    /// that output files depend only on the inputs.
    pub record_timing: bool,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            gt_tolerance: 0.1,
            record_timing: true,
        }
    }
}

/// Feeds `events` to `filter`.
///
/// A control event holds until the next one. Every measurement batch
/// triggers one filter step over the time elapsed since the previous step;
/// a control event arriving after time has elapsed first propagates the old
/// control up to its timestamp with an empty batch. Encoder velocities are
/// converted to axle velocities here. GPS fixes never reach the filter.
pub fn replay<F: SlamFilter + ?Sized>(
    filter: &mut F,
    events: &[SensorEvent],
    vehicle: &VehicleParams,
    opts: &ReplayOptions,
) -> Result<Vec<RunRow>> {
    let mut rows: Vec<RunRow> = Vec::new();
    let mut gps: Vec<(f64, [f64; 2])> = Vec::new();
    let mut control = ControlInput::new(0.0, 0.0);
    let mut have_control = false;
    let mut last_time = events.first().map_or(0.0, |e| e.time);

    let advance = |filter: &mut F, u: &ControlInput, time: f64, zs: &[Measurement], last: &mut f64, rows: &mut Vec<RunRow>| {
        let dt = (time - *last).max(MIN_STEP_DT);
        let result = filter.step(u, dt, zs)?;
        *last = time;
        rows.push(RunRow {
            step: rows.len(),
            time,
            estimate: result.estimated_pose,
            truth: None,
            step_ms: if opts.record_timing { result.step_time * 1e3 } else { 0.0 },
        });
        Ok::<(), SlamError>(())
    };

    for event in events {
        match &event.kind {
            EventKind::Control { v_e, alpha } => {
                if have_control && event.time > last_time {
                    advance(filter, &control, event.time, &[], &mut last_time, &mut rows)?;
                }
                let v = axle_velocity(*v_e, *alpha, vehicle)?;
                control = ControlInput::new(v, *alpha);
                if !have_control {
                    last_time = event.time;
                    have_control = true;
                }
            }
            EventKind::Measurements(zs) => {
                advance(filter, &control, event.time, zs, &mut last_time, &mut rows)?;
            }
            EventKind::GroundTruth { x, y } => gps.push((event.time, [*x, *y])),
        }
    }
    pair_ground_truth(&mut rows, &gps, opts.gt_tolerance);
    Ok(rows)
}

/// Gives each row the GPS fix nearest in time, if within `tolerance`.
/// Ties go to the earlier fix.
pub fn pair_ground_truth(rows: &mut [RunRow], gps: &[(f64, [f64; 2])], tolerance: f64) {
    for row in rows.iter_mut() {
        let idx = gps.partition_point(|(t, _)| *t < row.time);
        let mut best: Option<(f64, [f64; 2])> = None;
        for cand in [idx.checked_sub(1), Some(idx)].into_iter().flatten() {
            if let Some((t, p)) = gps.get(cand) {
                let gap = (t - row.time).abs();
                if gap <= tolerance && best.is_none_or(|(g, _)| gap < g) {
                    best = Some((gap, *p));
                }
            }
        }
        row.truth = best.map(|(_, p)| p);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Ekf,
    FastslamPrior,
    Ufastslam,
    Nano,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Ekf, Algorithm::FastslamPrior, Algorithm::Ufastslam, Algorithm::Nano];

    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Ekf => "ekf",
            Algorithm::FastslamPrior => "fastslam-prior",
            Algorithm::Ufastslam => "ufastslam",
            Algorithm::Nano => "nano",
        }
    }

    /// Display name used in comparison tables.
    pub fn label(&self) -> &'static str {
        match self {
            Algorithm::Ekf => "EKF-SLAM",
            Algorithm::FastslamPrior => "FastSLAM",
            Algorithm::Ufastslam => "UFastSLAM",
            Algorithm::Nano => "NANO-SLAM",
        }
    }

    /// Pose proposal used by the particle-filter variants.
    pub fn proposal_kind(&self) -> Option<ProposalKind> {
        match self {
            Algorithm::Ekf => None,
            Algorithm::FastslamPrior => Some(ProposalKind::PriorOnly),
            Algorithm::Ufastslam => Some(ProposalKind::Unscented),
            Algorithm::Nano => Some(ProposalKind::NaturalGradient),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = SlamError;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| SlamError::Config(format!("unknown algorithm '{s}' (expected ekf, fastslam-prior, ufastslam or nano)")))
    }
}

/// The filter configuration actually used for `algorithm`: the proposal kind
/// is set from the algorithm, everything else is taken from `base`.
pub fn effective_config(algorithm: Algorithm, base: &FilterConfig) -> FilterConfig {
    let mut cfg = *base;
    if let Some(kind) = algorithm.proposal_kind() {
        cfg.proposal.kind = kind;
    }
    cfg
}

/// Builds the requested filter, replays `events` and assembles the record.
pub fn run_algorithm(
    algorithm: Algorithm,
    base: &FilterConfig,
    events: &[SensorEvent],
    initial_pose: Pose,
    seed: u64,
    opts: &ReplayOptions,
) -> Result<RunRecord> {
    let cfg = effective_config(algorithm, base);
    let mut filter: Box<dyn SlamFilter> = match algorithm {
        Algorithm::Ekf => Box::new(EkfSlam::new(cfg, initial_pose)?),
        _ => Box::new(ParticleFilter::new(cfg, initial_pose, seed)?),
    };
    let rows = replay(filter.as_mut(), events, &cfg.vehicle, opts)?;
    let config = serde_json::json!({
        "algorithm": algorithm,
        "seed": seed,
        "initial_pose": initial_pose,
        "filter": cfg,
        "replay": opts,
    });
    Ok(RunRecord::new(
        rows,
        RunMeta {
            algorithm: algorithm.as_str().to_string(),
            seed,
            n_particles: if algorithm == Algorithm::Ekf { 1 } else { cfg.particle_count },
            landmarks: filter.landmark_count(),
            divergences: filter.total_divergences(),
            config,
        },
    ))
}
