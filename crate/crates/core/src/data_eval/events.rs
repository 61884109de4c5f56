//! Line-oriented sensor event files.
//!
//! One event per line, space separated, SI units and radians:
//!
//! ```text
//! # comment
//! 0.00 CONTROL 2.10 0.05
//! 0.10 MEAS 12.5 0.31 20.1 -0.72
//! 0.10 GPS 1.02 0.00
//! ```
//!
//! A file may have a `<file>.manifest.json` sidecar with per-kind event
//! counts; the loader checks its totals when present.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};
use crate::models::{wrap_angle, Measurement};

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    /// Encoder (rear wheel) velocity, m/s, and steering angle, rad.
    Control { v_e: f64, alpha: f64 },
    Measurements(Vec<Measurement>),
    /// GPS position, used only as ground truth.
    GroundTruth { x: f64, y: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorEvent {
    pub time: f64,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub control: usize,
    pub meas: usize,
    pub gps: usize,
    pub detections: usize,
}

impl Manifest {
    pub fn tally(events: &[SensorEvent]) -> Self {
        let mut m = Manifest::default();
        for e in events {
            match &e.kind {
                EventKind::Control { .. } => m.control += 1,
                EventKind::Measurements(zs) => {
                    m.meas += 1;
                    m.detections += zs.len();
                }
                EventKind::GroundTruth { .. } => m.gps += 1,
            }
        }
        m
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn parse_error(line: usize, message: impl Into<String>) -> SlamError {
    SlamError::Parse {
        line,
        message: message.into(),
    }
}

fn number(token: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = token
        .parse()
        .map_err(|_| parse_error(line, format!("{what}: '{token}' is not a number")))?;
    if !v.is_finite() {
        return Err(parse_error(line, format!("{what} is not finite")));
    }
    Ok(v)
}

/// Parses an event stream, checking time ordering.
pub fn parse_events<R: BufRead>(reader: R) -> Result<Vec<SensorEvent>> {
    let mut events = Vec::new();
    let mut last_time = f64::NEG_INFINITY;
    let mut last_control = f64::NEG_INFINITY;
    for (index, line) in reader.lines().enumerate() {
        let lineno = index + 1;
        let line = line?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let time = number(tokens.next().unwrap_or(""), lineno, "time")?;
        let tag = tokens
            .next()
            .ok_or_else(|| parse_error(lineno, "missing event kind"))?;
        let fields: Vec<&str> = tokens.collect();
        let kind = match tag {
            "CONTROL" => {
                if fields.len() != 2 {
                    return Err(parse_error(lineno, format!("CONTROL needs 2 fields, got {}", fields.len())));
                }
                EventKind::Control {
                    v_e: number(fields[0], lineno, "velocity")?,
                    alpha: number(fields[1], lineno, "steering")?,
                }
            }
            "MEAS" => {
                if !fields.len().is_multiple_of(2) {
                    return Err(parse_error(lineno, "MEAS needs range/bearing pairs"));
                }
                let zs = fields
                    .chunks(2)
                    .map(|pair| {
                        let range = number(pair[0], lineno, "range")?;
                        if range < 0.0 {
                            return Err(parse_error(lineno, "negative range"));
                        }
                        let bearing = number(pair[1], lineno, "bearing")?;
                        Ok(Measurement::new(range, wrap_angle(bearing)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                EventKind::Measurements(zs)
            }
            "GPS" => {
                if fields.len() != 2 {
                    return Err(parse_error(lineno, format!("GPS needs 2 fields, got {}", fields.len())));
                }
                EventKind::GroundTruth {
                    x: number(fields[0], lineno, "x")?,
                    y: number(fields[1], lineno, "y")?,
                }
            }
            other => return Err(parse_error(lineno, format!("unknown event kind '{other}'"))),
        };
        if time < last_time {
            return Err(parse_error(lineno, format!("time {time} precedes {last_time}")));
        }
        if matches!(kind, EventKind::Control { .. }) {
            if time <= last_control {
                return Err(parse_error(lineno, format!("control time {time} does not advance past {last_control}")));
            }
            last_control = time;
        }
        last_time = time;
        events.push(SensorEvent { time, kind });
    }
    Ok(events)
}

/// Loads an event file; if a manifest sidecar exists its counts must match.
pub fn load_events(path: &Path) -> Result<Vec<SensorEvent>> {
    let file = fs::File::open(path).map_err(|e| SlamError::Io(format!("{}: {e}", path.display())))?;
    let events = parse_events(BufReader::new(file))?;
    let manifest_file = manifest_path(path);
    if manifest_file.exists() {
        let text = fs::read_to_string(&manifest_file)?;
        let expected: Manifest = serde_json::from_str(&text)
            .map_err(|e| SlamError::Data(format!("{}: {e}", manifest_file.display())))?;
        let found = Manifest::tally(&events);
        if found != expected {
            return Err(SlamError::Data(format!(
                "{} lists {expected:?} but the file holds {found:?}",
                manifest_file.display()
            )));
        }
    }
    Ok(events)
}

pub fn format_event(event: &SensorEvent) -> String {
    match &event.kind {
        EventKind::Control { v_e, alpha } => format!("{} CONTROL {} {}", event.time, v_e, alpha),
        EventKind::Measurements(zs) => {
            let mut s = format!("{} MEAS", event.time);
            for z in zs {
                s.push_str(&format!(" {} {}", z.range, z.bearing));
            }
            s
        }
        EventKind::GroundTruth { x, y } => format!("{} GPS {} {}", event.time, x, y),
    }
}

/// Writes events and their manifest sidecar. Numbers use shortest
/// round-trip formatting, so reloading is exact.
pub fn write_events(path: &Path, events: &[SensorEvent]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for e in events {
        writeln!(out, "{}", format_event(e))?;
    }
    out.flush()?;
    let manifest = serde_json::to_string_pretty(&Manifest::tally(events))
        .map_err(|e| SlamError::Io(e.to_string()))?;
    fs::write(manifest_path(path), manifest + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<SensorEvent>> {
        parse_events(text.as_bytes())
    }

    #[test]
    fn empty_input_is_an_empty_stream() {
        assert!(parse("").unwrap().is_empty());
        assert!(parse("# only a comment\n\n   \n").unwrap().is_empty());
    }

    #[test]
    fn three_line_fixture() {
        let events = parse("0.0 CONTROL 2.0 0.1\n0.1 MEAS 10.0 0.5 4.0 -0.25 # two detections\n0.1 GPS 0.2 0.0\n").unwrap();
        assert_eq!(events.len(), 3);
        assert_eq!(events[0].kind, EventKind::Control { v_e: 2.0, alpha: 0.1 });
        assert_eq!(
            events[1].kind,
            EventKind::Measurements(vec![Measurement::new(10.0, 0.5), Measurement::new(4.0, -0.25)])
        );
        assert_eq!(events[2].kind, EventKind::GroundTruth { x: 0.2, y: 0.0 });
        assert!(events.windows(2).all(|w| w[0].time <= w[1].time));
    }

    fn line_of(err: SlamError) -> usize {
        match err {
            SlamError::Parse { line, .. } => line,
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_records_report_their_line() {
        assert_eq!(line_of(parse("0 CONTROL 1 0\n0.1 CONTROL 1\n").unwrap_err()), 2);
        assert_eq!(line_of(parse("# c\n0 MEAS 1 0 2\n").unwrap_err()), 2);
        assert_eq!(line_of(parse("0 GPS x 0\n").unwrap_err()), 1);
        assert_eq!(line_of(parse("0 LIDAR 1 2\n").unwrap_err()), 1);
        assert_eq!(line_of(parse("abc CONTROL 1 0\n").unwrap_err()), 1);
        assert_eq!(line_of(parse("0 MEAS -1 0\n").unwrap_err()), 1);
        assert_eq!(line_of(parse("0 CONTROL nan 0\n").unwrap_err()), 1);
    }

    #[test]
    fn time_must_not_go_backwards() {
        assert_eq!(line_of(parse("1.0 GPS 0 0\n0.5 GPS 0 0\n").unwrap_err()), 2);
        // controls must strictly advance, other kinds may share a timestamp
        assert_eq!(line_of(parse("1.0 CONTROL 1 0\n1.0 CONTROL 1 0\n").unwrap_err()), 2);
        assert!(parse("1.0 MEAS\n1.0 GPS 0 0\n1.0 CONTROL 1 0\n").is_ok());
    }

    #[test]
    fn write_then_load_round_trips_with_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.txt");
        let events = vec![
            SensorEvent { time: 0.0, kind: EventKind::Control { v_e: 1.0 / 3.0, alpha: -0.1 } },
            SensorEvent { time: 0.1, kind: EventKind::Measurements(vec![Measurement::new(std::f64::consts::PI, 0.7)]) },
            SensorEvent { time: 0.1, kind: EventKind::GroundTruth { x: 1e-17, y: -2.5 } },
            SensorEvent { time: 0.2, kind: EventKind::Measurements(vec![]) },
        ];
        write_events(&path, &events).unwrap();
        assert_eq!(load_events(&path).unwrap(), events);
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path(&path)).unwrap()).unwrap();
        assert_eq!(manifest, Manifest { control: 1, meas: 2, gps: 1, detections: 1 });

        // a tampered manifest is detected
        fs::write(manifest_path(&path), r#"{"control":2,"meas":2,"gps":1,"detections":1}"#).unwrap();
        assert!(matches!(load_events(&path), Err(SlamError::Data(_))));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(load_events(Path::new("/nonexistent/events.txt")), Err(SlamError::Io(_))));
    }
}
