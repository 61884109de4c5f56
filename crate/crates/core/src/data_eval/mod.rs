//! Dataset ingestion, synthetic worlds, run replay and evaluation.

pub mod events;
pub mod record;
pub mod runner;
pub mod simulate;

pub use events::{load_events, parse_events, write_events, EventKind, Manifest, SensorEvent};
pub use record::{config_hash, read_run, rmse, write_run, RunMeta, RunRecord, RunRow, RunSummary, SCHEMA_VERSION};
pub use runner::{effective_config, replay, run_algorithm, Algorithm, ReplayOptions, SlamFilter};
pub use simulate::{simulate, ControlSegment, LandmarkLayout, SimulatedRun, WorldConfig};
