//! Landmark SLAM for car-like vehicles.
//!
//! A Rao-Blackwellized particle filter whose per-particle pose proposal is
//! produced by one of three interchangeable solvers: the motion prior alone,
//! an unscented measurement update, or a natural-gradient Gaussian
//! approximation of the measurement-conditioned posterior. A joint-state
//! EKF-SLAM baseline, a synthetic world simulator, an event-file loader and
//! run metrics complete the toolkit.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data_eval;
pub mod ekf_slam;
pub mod error;
pub mod gaussian;
pub mod models;
pub mod map_store;
pub mod proposal;
pub mod rbpf;
pub mod selftest;

pub use error::{Result, SlamError};
pub use gaussian::{kl_divergence, ut_propagate, Gaussian, SigmaPointSet, UtParams};
pub use models::{
    axle_velocity, inverse_measurement, jacobian_landmark, jacobian_pose, motion_step,
    predict_measurement, wrap_angle, AffineModel, ControlInput, Landmark, Measurement,
    MeasurementModel, Pose, RangeBearing, VehicleParams,
};
pub use map_store::{
    associate, ekf_update, init_landmark, innovation_cov, AssociationSet, Gates, LandmarkEstimate,
    LandmarkId, LandmarkMap,
};
pub use proposal::{ExpectationMode, ProposalKind, ProposalStrategy};
pub use rbpf::{
    AssociationCounts, EstimateRule, FilterConfig, NoiseConfig, Particle, ParticleFilter,
    StepResult, WeightForm,
};
pub use ekf_slam::EkfSlam;
pub use data_eval::{Algorithm, SensorEvent, WorldConfig};
