//! Subcommand implementations.

use std::path::{Path, PathBuf};

use clap::Args;
use nanoslam::data_eval::{run_algorithm, write_events, write_run, RunRecord};
use nanoslam::selftest::{self, SelftestOptions};
use nanoslam::{Algorithm, SlamError};

use crate::settings::{Input, Settings};

/// One filter run over `input`, with the input description echoed into the
/// summary configuration.
fn run_once(algorithm: Algorithm, input: &Input, settings: &Settings, seed: u64) -> Result<RunRecord, SlamError> {
    let opts = settings.replay_options();
    let mut record = run_algorithm(algorithm, &input.filter, &input.events, input.start, seed, &opts)?;
    let mut config = record.summary.config.clone();
    config["input"] = input.description.clone();
    record.set_config(config);
    Ok(record)
}

fn summary_line(record: &RunRecord) -> String {
    let s = &record.summary;
    let rmse = s.rmse_m.map(|r| format!("{r:.3} m")).unwrap_or_else(|| "n/a (no ground truth)".into());
    format!(
        "{}: RMSE {rmse}, mean step {:.3} ms, max step {:.3} ms, {} steps, {} landmarks, {} divergences",
        s.algorithm, s.mean_step_ms, s.max_step_ms, s.steps, s.landmarks, s.divergences
    )
}

pub fn run(settings: &Settings) -> Result<u8, SlamError> {
    let algorithm = settings.algo.unwrap_or(Algorithm::Nano);
    let input = settings.input()?;
    let record = run_once(algorithm, &input, settings, settings.seed())?;
    let out = settings.out.clone().unwrap_or_else(|| PathBuf::from("run.csv"));
    write_run(&record, &out)?;
    println!("{} -> {}", summary_line(&record), out.display());
    Ok(0)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-repeat filter seed; distinct across repeats, shared across filters.
fn derived_seed(base: u64, repeat: usize) -> u64 {
    base.wrapping_add((repeat as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Mean and standard deviation.
type Spread = (f64, f64);

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub label: &'static str,
    /// Mean and standard deviation of RMSE, m, and of the mean step time, ms.
    pub result: Result<(Spread, Spread), String>,
}

pub fn format_table(rows: &[CompareRow]) -> String {
    let mut out = format!("{:<12} {:>18} {:>18}\n", "Method", "RMSE [m]", "Time [ms]");
    for row in rows {
        match &row.result {
            Ok(((rm, rs), (tm, ts))) => out.push_str(&format!(
                "{:<12} {:>18} {:>18}\n",
                row.label,
                format!("{rm:.3} ± {rs:.3}"),
                format!("{tm:.3} ± {ts:.3}")
            )),
            Err(e) => out.push_str(&format!("{:<12} failed: {e}\n", row.label)),
        }
    }
    out
}

pub fn compare(settings: &Settings) -> Result<u8, SlamError> {
    let algorithms = settings
        .algos
        .clone()
        .unwrap_or_else(|| vec![Algorithm::Ekf, Algorithm::Ufastslam, Algorithm::Nano]);
    if algorithms.len() < 2 {
        return Err(SlamError::Config("compare needs at least two filters in --algos".into()));
    }
    let repeats = settings.repeats.unwrap_or(1);
    if repeats == 0 {
        return Err(SlamError::Config("--repeats must be at least 1".into()));
    }
    let input = settings.input()?;
    if let Some(dir) = &settings.out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut rows = Vec::new();
    for algorithm in algorithms {
        let mut rmse = Vec::new();
        let mut time = Vec::new();
        let mut failure = None;
        for repeat in 0..repeats {
            let seed = derived_seed(settings.seed(), repeat);
            let outcome = run_once(algorithm, &input, settings, seed).and_then(|record| {
                if let Some(dir) = &settings.out_dir {
                    write_run(&record, &run_path(dir, algorithm, repeat))?;
                }
                Ok(record)
            });
            match outcome {
                Ok(record) => match record.summary.rmse_m {
                    Some(r) => {
                        rmse.push(r);
                        time.push(record.summary.mean_step_ms);
                    }
                    None => failure = Some("no ground truth paired with any step".to_string()),
                },
                Err(e) => failure = Some(e.to_string()),
            }
            if failure.is_some() {
                break;
            }
        }
        let result = match failure {
            Some(e) => Err(e),
            None => Ok((mean_std(&rmse), mean_std(&time))),
        };
        rows.push(CompareRow { label: algorithm.label(), result });
    }
    print!("{}", format_table(&rows));
    let failed = rows.iter().filter(|r| r.result.is_err()).count();
    if failed > 0 {
        eprintln!("{failed} of {} filters failed", rows.len());
        return Ok(3);
    }
    Ok(0)
}

fn run_path(dir: &Path, algorithm: Algorithm, repeat: usize) -> PathBuf {
    dir.join(format!("{}-{repeat}.csv", algorithm.as_str()))
}

pub fn simulate(settings: &Settings) -> Result<u8, SlamError> {
    if settings.dataset.is_some() {
        return Err(SlamError::Config("simulate does not read a dataset".into()));
    }
    let with_world = Settings {
        synthetic: Some(settings.synthetic.clone().unwrap_or_else(|| "default".into())),
        ..settings.clone()
    };
    let world = with_world.world()?.expect("a synthetic world was requested");
    let run = nanoslam::data_eval::simulate(&world)?;
    let out = settings.out.clone().unwrap_or_else(|| PathBuf::from("events.txt"));
    write_events(&out, &run.events)?;
    println!(
        "{} events ({} steps, {} landmarks) -> {}",
        run.events.len(),
        world.total_steps(),
        run.landmarks.len(),
        out.display()
    );
    Ok(0)
}

#[derive(Debug, Clone, Args)]
pub struct SelftestArgs {
    /// Random fixtures per derivative check.
    #[arg(long, default_value_t = 1000)]
    pub fixtures: usize,
    /// Offset added to the measurement pose Jacobian, to confirm that a
    /// broken derivative is caught.
    #[arg(long, default_value_t = 0.0, hide = true)]
    pub perturb_pose_jacobian: f64,
}

pub fn selftest(args: &SelftestArgs) -> u8 {
    let opts = SelftestOptions {
        pose_jacobian_perturbation: args.perturb_pose_jacobian,
        fixtures: args.fixtures,
        ..SelftestOptions::default()
    };
    let outcomes = selftest::run(&opts);
    for o in &outcomes {
        println!(
            "{} {:<30} {} ({:.3} s)",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.detail,
            o.seconds
        );
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed == 0 {
        println!("all {} checks passed", outcomes.len());
        0
    } else {
        println!("{failed} of {} checks failed", outcomes.len());
        1
    }
}
