//! Run settings from flags and flat JSON config files.
//!
//! Every command-line option has a config-file key of the same name in
//! snake_case. Values from the command line override the file. Angles are
//! given in radians by default or with an explicit `deg`/`rad` suffix, e.g.
//! `6deg`, `0.1rad`, `0.1`; in JSON they may be numbers or such strings.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Deserializer, Serialize};

use nanoslam::data_eval::{load_events, simulate, ReplayOptions, WorldConfig};
use nanoslam::{
    Algorithm, EstimateRule, ExpectationMode, FilterConfig, Pose, SensorEvent, SlamError,
    VehicleParams, WeightForm,
};

/// An angle normalized to radians at parse time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Angle(pub f64);

impl FromStr for Angle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (number, to_rad) = if let Some(v) = s.strip_suffix("deg") {
            (v, std::f64::consts::PI / 180.0)
        } else if let Some(v) = s.strip_suffix("rad") {
            (v, 1.0)
        } else {
            (s, 1.0)
        };
        let value: f64 = number
            .trim()
            .parse()
            .map_err(|_| format!("'{s}' is not an angle (use e.g. 0.1, 0.1rad or 6deg)"))?;
        if !value.is_finite() {
            return Err(format!("angle '{s}' is not finite"));
        }
        Ok(Angle(value * to_rad))
    }
}

impl<'de> Deserialize<'de> for Angle {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(v) => Ok(Angle(v)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VehicleChoice {
    /// Bicycle model tracking the rear axle.
    Default,
    /// Victoria Park utility vehicle tracking its laser mount.
    Victoria,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateChoice {
    MaxWeight,
    WeightedMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightChoice {
    Product,
    SumOfLikelihoods,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpectationChoice {
    SigmaPoint,
    MeanOnly,
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    s.parse::<Algorithm>().map_err(|e| e.to_string())
}

/// Options shared by the run, compare and simulate commands.
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Flat JSON file with default values for any of these options.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Filter: ekf, fastslam-prior, ufastslam or nano.
    #[arg(long, value_parser = parse_algorithm)]
    pub algo: Option<Algorithm>,
    /// Comma-separated filters for `compare`.
    #[arg(long, value_delimiter = ',', value_parser = parse_algorithm)]
    pub algos: Option<Vec<Algorithm>>,
    /// Event file to replay.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Synthetic world: `default` or a WorldConfig JSON file.
    #[arg(long)]
    pub synthetic: Option<String>,
    /// Landmark count of the default synthetic world.
    #[arg(long)]
    pub landmarks: Option<usize>,
    /// Step count of the default synthetic world.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Seed of the synthetic world; defaults to --seed.
    #[arg(long)]
    pub world_seed: Option<u64>,
    /// Sensor field of view of the synthetic world.
    #[arg(long)]
    pub fov: Option<Angle>,
    /// Sensor range of the synthetic world, m.
    #[arg(long)]
    pub max_range: Option<f64>,

    /// Particle count.
    #[arg(long)]
    pub particles: Option<usize>,
    /// Velocity noise, m/s.
    #[arg(long)]
    pub sigma_v: Option<f64>,
    /// Steering noise.
    #[arg(long)]
    pub sigma_g: Option<Angle>,
    /// Range noise, m.
    #[arg(long)]
    pub sigma_r: Option<f64>,
    /// Bearing noise.
    #[arg(long)]
    pub sigma_b: Option<Angle>,
    /// Vehicle geometry.
    #[arg(long, value_enum)]
    pub vehicle: Option<VehicleChoice>,
    /// Resample when the effective sample size drops below this fraction.
    #[arg(long)]
    pub resample_threshold: Option<f64>,
    /// Pose estimate reported by particle filters.
    #[arg(long, value_enum)]
    pub estimate_rule: Option<EstimateChoice>,
    /// How per-match likelihoods combine into a particle weight.
    #[arg(long, value_enum)]
    pub weight_form: Option<WeightChoice>,
    /// Association gate for matching a detection, chi-square with 2 dof.
    #[arg(long)]
    pub chi2_match: Option<f64>,
    /// Gate above which an unmatched detection starts a new landmark.
    #[arg(long)]
    pub chi2_new: Option<f64>,
    /// Natural-gradient iteration cap.
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Natural-gradient stopping threshold, nats.
    #[arg(long)]
    pub kl_threshold: Option<f64>,
    /// How expected log-likelihoods are evaluated in the proposal solve.
    #[arg(long, value_enum)]
    pub expectation: Option<ExpectationChoice>,

    /// Filter seed; also seeds the synthetic world unless --world-seed is given.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ground-truth pairing tolerance, s.
    #[arg(long)]
    pub gt_tolerance: Option<f64>,
    /// Write zero step times so that output files are reproducible.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_timing: Option<bool>,
    /// Output file (run: CSV, simulate: event file).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for per-run CSVs of `compare`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Runs per filter for `compare`.
    #[arg(long)]
    pub repeats: Option<usize>,
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($field:ident),* $(,)?) => {
        Settings { config: $top.config.or($base.config), $($field: $top.$field.or($base.$field)),* }
    };
}

impl Settings {
    /// Fields set in `top` replace those of `self`.
    pub fn overlay(self, top: Settings) -> Settings {
        let base = self;
        overlay!(base, top;
            algo, algos, dataset, synthetic, landmarks, steps, world_seed, fov, max_range,
            particles, sigma_v, sigma_g, sigma_r, sigma_b, vehicle, resample_threshold,
            estimate_rule, weight_form, chi2_match, chi2_new, max_iters, kl_threshold,
            expectation, seed, gt_tolerance, no_timing, out, out_dir, repeats,
        )
    }

    pub fn from_json(text: &str) -> Result<Settings, SlamError> {
        serde_json::from_str(text).map_err(|e| SlamError::Config(format!("config file: {e}")))
    }

    /// Flags layered over the config file named by `--config`, if any.
    pub fn resolve(flags: Settings) -> Result<Settings, SlamError> {
        match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| SlamError::Config(format!("{}: {e}", path.display())))?;
                Ok(Settings::from_json(&text)?.overlay(flags))
            }
            None => Ok(flags),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn replay_options(&self) -> ReplayOptions {
        let defaults = ReplayOptions::default();
        ReplayOptions {
            gt_tolerance: self.gt_tolerance.unwrap_or(defaults.gt_tolerance),
            record_timing: !self.no_timing.unwrap_or(false),
        }
    }

    fn apply_noise(&self, noise: &mut nanoslam::NoiseConfig) {
        if let Some(v) = self.sigma_v {
            noise.sigma_v = v;
        }
        if let Some(a) = self.sigma_g {
            noise.sigma_g = a.0;
        }
        if let Some(v) = self.sigma_r {
            noise.sigma_r = v;
        }
        if let Some(a) = self.sigma_b {
            noise.sigma_b = a.0;
        }
    }

    /// The synthetic world, or `None` for dataset runs.
    pub fn world(&self) -> Result<Option<WorldConfig>, SlamError> {
        let Some(name) = &self.synthetic else {
            return Ok(None);
        };
        let mut world = if name == "default" {
            WorldConfig::loop_world(self.landmarks.unwrap_or(40), self.steps.unwrap_or(500), 0)
        } else {
            let text = std::fs::read_to_string(name)
                .map_err(|e| SlamError::Config(format!("synthetic world {name}: {e}")))?;
            serde_json::from_str(&text).map_err(|e| SlamError::Config(format!("synthetic world {name}: {e}")))?
        };
        world.seed = self.world_seed.unwrap_or(self.seed());
        if let Some(fov) = self.fov {
            world.fov = fov.0;
        }
        if let Some(r) = self.max_range {
            world.max_range = r;
        }
        if let Some(v) = self.vehicle {
            world.vehicle = vehicle_params(v, world.vehicle.dt);
        }
        self.apply_noise(&mut world.noise);
        world.validate()?;
        Ok(Some(world))
    }

    /// Filter configuration for `vehicle`, with every override applied.
    pub fn filter_config(&self, vehicle: VehicleParams) -> Result<FilterConfig, SlamError> {
        let mut cfg = FilterConfig { vehicle, ..FilterConfig::default() };
        if let Some(n) = self.particles {
            cfg.particle_count = n;
        }
        self.apply_noise(&mut cfg.noise);
        if let Some(t) = self.resample_threshold {
            cfg.resample_threshold = t;
        }
        if let Some(rule) = self.estimate_rule {
            cfg.estimate_rule = match rule {
                EstimateChoice::MaxWeight => EstimateRule::MaxWeight,
                EstimateChoice::WeightedMean => EstimateRule::WeightedMean,
            };
        }
        if let Some(form) = self.weight_form {
            cfg.weight_form = match form {
                WeightChoice::Product => WeightForm::Product,
                WeightChoice::SumOfLikelihoods => WeightForm::SumOfLikelihoods,
            };
        }
        if let Some(g) = self.chi2_match {
            cfg.gates.chi2_match = g;
        }
        if let Some(g) = self.chi2_new {
            cfg.gates.chi2_new = g;
        }
        if let Some(n) = self.max_iters {
            cfg.proposal.max_iters = n;
        }
        if let Some(k) = self.kl_threshold {
            cfg.proposal.kl_threshold = k;
        }
        if let Some(e) = self.expectation {
            cfg.proposal.expectation = match e {
                ExpectationChoice::SigmaPoint => ExpectationMode::SigmaPoint,
                ExpectationChoice::MeanOnly => ExpectationMode::MeanOnly,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads or simulates the input events.
    pub fn input(&self) -> Result<Input, SlamError> {
        match (&self.dataset, &self.synthetic) {
            (Some(_), Some(_)) => Err(SlamError::Config("give either --dataset or --synthetic, not both".into())),
            (None, None) => Err(SlamError::Config("no input: give --dataset <file> or --synthetic default".into())),
            (Some(path), None) => {
                let events = load_events(path).map_err(|e| match e {
                    SlamError::Io(m) => SlamError::Data(m),
                    other => other,
                })?;
                let vehicle = vehicle_params(self.vehicle.unwrap_or(VehicleChoice::Victoria), 0.1);
                Ok(Input {
                    events,
                    start: Pose::default(),
                    filter: self.filter_config(vehicle)?,
                    description: serde_json::json!({ "dataset": path }),
                })
            }
            (None, Some(_)) => {
                let world = self.world()?.expect("synthetic input was requested");
                let run = simulate(&world)?;
                Ok(Input {
                    events: run.events,
                    start: world.start,
                    filter: self.filter_config(world.vehicle)?,
                    description: serde_json::json!({ "synthetic": world }),
                })
            }
        }
    }
}

pub fn vehicle_params(choice: VehicleChoice, dt: f64) -> VehicleParams {
    let p = match choice {
        VehicleChoice::Default => VehicleParams::default(),
        VehicleChoice::Victoria => VehicleParams::victoria_park(),
    };
    p.with_dt(dt)
}

/// Events to replay plus what the filter needs to know about them.
#[derive(Debug, Clone)]
pub struct Input {
    pub events: Vec<SensorEvent>,
    pub start: Pose,
    pub filter: FilterConfig,
    /// Echoed into run summaries.
    pub description: serde_json::Value,
}
