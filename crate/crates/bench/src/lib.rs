//! Shared fixtures for the benchmarks.

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nanoslam::data_eval::{simulate, SimulatedRun};
use nanoslam::ekf_slam::with_landmarks;
use nanoslam::{EkfSlam, FilterConfig, LandmarkEstimate, LandmarkId, LandmarkMap, Pose, WorldConfig};

/// The default synthetic loop and its simulated events.
pub fn loop_run(seed: u64) -> (WorldConfig, SimulatedRun) {
    let world = WorldConfig::loop_world(40, 500, seed);
    let run = simulate(&world).expect("default world is valid");
    (world, run)
}

/// A map of `m` landmarks scattered over a 2 km square.
pub fn random_map(m: usize, seed: u64) -> LandmarkMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = LandmarkMap::new();
    for _ in 0..m {
        let id = map.next_id();
        map.insert_new(LandmarkEstimate {
            id,
            mean: Vector2::new(rng.random_range(-1000.0..1000.0), rng.random_range(-1000.0..1000.0)),
            cov: Matrix2::identity(),
            observation_count: 1,
        });
    }
    map
}

/// An EKF-SLAM state holding `m` landmarks around the origin, plus `k`
/// detections of them taken from the current pose.
pub fn ekf_with(m: usize, k: usize) -> (EkfSlam, Vec<(LandmarkId, Vector2<f64>)>) {
    use nanoslam::MeasurementModel;
    let mut rng = ChaCha8Rng::seed_from_u64(m as u64);
    let landmarks: Vec<(Vector2<f64>, Matrix2<f64>)> = (0..m)
        .map(|_| (Vector2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)), Matrix2::identity() * 0.5))
        .collect();
    let filter = with_landmarks(FilterConfig::default(), Pose::default(), &landmarks).expect("landmarks are valid");
    let pose = filter.pose();
    let matches = (0..k.min(m))
        .map(|i| {
            let block = (i * 7) % m;
            let z = nanoslam::RangeBearing
                .predict(&pose, &filter.landmark(block).mean)
                .expect("landmark is away from the pose");
            (filter.id_of(block).expect("block exists"), z + Vector2::new(0.1, 0.001))
        })
        .collect();
    (filter, matches)
}
