//! Run records: a per-step CSV plus a JSON summary sidecar.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SlamError};
use crate::models::Pose;

pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: &str = "step,time,est_x,est_y,est_theta,gt_x,gt_y,err,step_ms";

/// Root mean square Euclidean distance between paired positions.
pub fn rmse(estimates: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    if estimates.len() != truth.len() {
        return Err(SlamError::Data(format!(
            "rmse needs equal lengths (got {} and {})",
            estimates.len(),
            truth.len()
        )));
    }
    if estimates.is_empty() {
        return Err(SlamError::Data("rmse needs at least one pair".into()));
    }
    let sum: f64 = estimates
        .iter()
        .zip(truth)
        .map(|(e, t)| (e[0] - t[0]).powi(2) + (e[1] - t[1]).powi(2))
        .sum();
    Ok((sum / estimates.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub step: usize,
    pub time: f64,
    pub estimate: Pose,
    /// Ground-truth position paired with this step, if any.
    pub truth: Option<[f64; 2]>,
    pub step_ms: f64,
}

impl RunRow {
    pub fn error(&self) -> Option<f64> {
        self.truth
            .map(|t| (self.estimate.x - t[0]).hypot(self.estimate.y - t[1]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    /// `None` when no step had ground truth.
    pub rmse_m: Option<f64>,
    pub mean_step_ms: f64,
    pub max_step_ms: f64,
    pub n_particles: usize,
    pub seed: u64,
    pub algorithm: String,
    pub config_hash: String,
    pub steps: usize,
    pub paired_steps: usize,
    pub landmarks: usize,
    pub divergences: usize,
    /// The effective configuration the run used.
    pub config: serde_json::Value,
}

/// Hex SHA-256 of the compact JSON form of `config`.
pub fn config_hash(config: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<RunRow>,
    pub summary: RunSummary,
}

/// Identification of a run, echoed into its summary.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub algorithm: String,
    pub seed: u64,
    pub n_particles: usize,
    pub landmarks: usize,
    pub divergences: usize,
    pub config: serde_json::Value,
}

impl RunRecord {
    pub fn new(rows: Vec<RunRow>, meta: RunMeta) -> Self {
        let (est, gt): (Vec<[f64; 2]>, Vec<[f64; 2]>) = rows
            .iter()
            .filter_map(|r| r.truth.map(|t| ([r.estimate.x, r.estimate.y], t)))
            .unzip();
        let rmse_m = rmse(&est, &gt).ok();
        let times: Vec<f64> = rows.iter().map(|r| r.step_ms).collect();
        let mean_step_ms = if times.is_empty() { 0.0 } else { times.iter().sum::<f64>() / times.len() as f64 };
        let max_step_ms = times.iter().copied().fold(0.0, f64::max);
        let summary = RunSummary {
            schema_version: SCHEMA_VERSION,
            rmse_m,
            mean_step_ms,
            max_step_ms,
            n_particles: meta.n_particles,
            seed: meta.seed,
            algorithm: meta.algorithm,
            config_hash: config_hash(&meta.config),
            steps: rows.len(),
            paired_steps: est.len(),
            landmarks: meta.landmarks,
            divergences: meta.divergences,
            config: meta.config,
        };
        Self { rows, summary }
    }

    /// Replaces the echoed configuration and its hash.
    pub fn set_config(&mut self, config: serde_json::Value) {
        self.summary.config_hash = config_hash(&config);
        self.summary.config = config;
    }
}

/// `run.csv` -> `run.summary.json`.
pub fn summary_path(path: &Path) -> PathBuf {
    path.with_extension("summary.json")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the CSV at `path` and the summary next to it.
pub fn write_run(record: &RunRecord, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{CSV_HEADER}")?;
    for r in &record.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.step,
            r.time,
            r.estimate.x,
            r.estimate.y,
            r.estimate.theta,
            opt(r.truth.map(|t| t[0])),
            opt(r.truth.map(|t| t[1])),
            opt(r.error()),
            r.step_ms
        )?;
    }
    out.flush()?;
    let json = serde_json::to_string_pretty(&record.summary).map_err(|e| SlamError::Io(e.to_string()))?;
    fs::write(summary_path(path), json + "\n")?;
    Ok(())
}

/// Reads a run written by [`write_run`].
pub fn read_run(path: &Path) -> Result<RunRecord> {
    let file = fs::File::open(path).map_err(|e| SlamError::Io(format!("{}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != CSV_HEADER {
        return Err(SlamError::Parse { line: 1, message: format!("unexpected header '{header}'") });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(SlamError::Parse { line: lineno, message: format!("expected 9 fields, got {}", f.len()) });
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| SlamError::Parse { line: lineno, message: format!("'{s}' is not a number") })
        };
        let truth = match (f[5], f[6]) {
            ("", "") => None,
            (x, y) => Some([num(x)?, num(y)?]),
        };
        rows.push(RunRow {
            step: f[0]
                .parse()
                .map_err(|_| SlamError::Parse { line: lineno, message: "bad step index".into() })?,
            time: num(f[1])?,
            // stored headings are already wrapped; keep them bit-exact
            estimate: Pose { x: num(f[2])?, y: num(f[3])?, theta: num(f[4])? },
            truth,
            step_ms: num(f[8])?,
        });
    }
    let text = fs::read_to_string(summary_path(path))?;
    let summary: RunSummary = serde_json::from_str(&text).map_err(|e| SlamError::Data(e.to_string()))?;
    if summary.schema_version != SCHEMA_VERSION {
        return Err(SlamError::Data(format!(
            "schema version {} is not {SCHEMA_VERSION}",
            summary.schema_version
        )));
    }
    Ok(RunRecord { rows, summary })
}
