//! Trajectory artifacts: a per-sample CSV, a raw state CSV for exact reloads,
//! and a JSON summary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Event, IntegratorConfig, StepStats, Trajectory};
use crate::error::{Error, Result};
use crate::losses::Field;

/// 17 significant digits; parses back to the identical `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactPaths {
    pub csv: PathBuf,
    pub state: PathBuf,
    pub summary: PathBuf,
}

impl ArtifactPaths {
    /// `base.csv`, `base.state.csv`, `base.summary.json`.
    pub fn from_base(base: impl AsRef<Path>) -> Self {
        let base = base.as_ref().to_string_lossy().into_owned();
        Self {
            csv: PathBuf::from(format!("{base}.csv")),
            state: PathBuf::from(format!("{base}.state.csv")),
            summary: PathBuf::from(format!("{base}.summary.json")),
        }
    }

    /// Accepts any of the three artifact paths or the bare base.
    pub fn from_any(path: impl AsRef<Path>) -> Self {
        let s = path.as_ref().to_string_lossy().into_owned();
        for suffix in [".summary.json", ".state.csv", ".csv"] {
            if let Some(base) = s.strip_suffix(suffix) {
                return Self::from_base(base);
            }
        }
        Self::from_base(s)
    }
}

pub fn trajectory_header(p: usize) -> Vec<String> {
    let mut h: Vec<String> = ["t", "loss", "gamma", "int_gamma", "entropy"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for series in ["sigma", "u", "a"] {
        h.extend((0..p).map(|i| format!("{series}_{i}")));
    }
    h
}

pub fn write_trajectory_csv(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(trajectory_header(traj.p()))?;
    for s in &traj.samples {
        let mut row = vec![
            fmt_f64(s.t),
            fmt_f64(s.loss()),
            fmt_f64(s.gamma()),
            fmt_f64(s.int_gamma),
            fmt_f64(s.entropy),
        ];
        for series in [s.sigma(), s.u(), s.a()] {
            row.extend(series.iter().map(|&v| fmt_f64(v)));
        }
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_state_csv(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n = traj.field.dim();
    let mut header = vec!["t".to_string(), "int_gamma".to_string()];
    header.extend((0..n).map(|i| format!("x_{i}")));
    w.write_record(header)?;
    for s in &traj.samples {
        let mut row = vec![fmt_f64(s.t), fmt_f64(s.int_gamma)];
        row.extend(s.state.iter().map(|&v| fmt_f64(v)));
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalValues {
    pub t: f64,
    pub loss: f64,
    pub gamma: f64,
    pub int_gamma: f64,
    pub entropy: f64,
    pub max_sigma: f64,
    pub sigma: Vec<f64>,
    pub u: Vec<f64>,
    pub a: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub field: Field,
    pub config: IntegratorConfig,
    pub samples: usize,
    #[serde(rename = "final")]
    pub final_values: FinalValues,
    pub events: Vec<Event>,
    pub stats: StepStats,
    pub next_dt: Option<f64>,
    pub error: Option<String>,
}

impl Summary {
    pub fn of(traj: &Trajectory, error: Option<&Error>) -> Self {
        let s = traj.last();
        Self {
            field: traj.field.clone(),
            config: traj.config,
            samples: traj.samples.len(),
            final_values: FinalValues {
                t: s.t,
                loss: s.loss(),
                gamma: s.gamma(),
                int_gamma: s.int_gamma,
                entropy: s.entropy,
                max_sigma: s.max_sigma,
                sigma: s.sigma().to_vec(),
                u: s.u().to_vec(),
                a: s.a().to_vec(),
            },
            events: traj.events.clone(),
            stats: traj.stats,
            next_dt: traj.next_dt,
            error: error.map(|e| e.to_string()),
        }
    }
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_summary(traj: &Trajectory, error: Option<&Error>, path: impl AsRef<Path>) -> Result<()> {
    write_json(&Summary::of(traj, error), path)
}

/// Writes all three artifacts next to `base`.
pub fn write_artifacts(traj: &Trajectory, error: Option<&Error>, base: impl AsRef<Path>) -> Result<ArtifactPaths> {
    let paths = ArtifactPaths::from_base(base);
    write_trajectory_csv(traj, &paths.csv)?;
    write_state_csv(traj, &paths.state)?;
    write_summary(traj, error, &paths.summary)?;
    Ok(paths)
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("not a number: {s:?}")))
}

/// Reloads a trajectory from its summary and state CSV; samples are
/// recomputed from the stored states.
pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    let paths = ArtifactPaths::from_any(path);
    let summary: Summary = serde_json::from_reader(File::open(&paths.summary)?)?;
    let mut r = csv::Reader::from_path(&paths.state)?;
    let n = summary.field.dim();
    let header = r.headers()?.clone();
    if header.len() != n + 2 || &header[0] != "t" || &header[1] != "int_gamma" {
        return Err(Error::SchemaMismatch(format!(
            "{} does not hold {} states",
            paths.state.display(),
            summary.field.name()
        )));
    }
    let mut rows = vec![];
    for rec in r.records() {
        let rec = rec?;
        let vals = rec.iter().map(parse_f64).collect::<Result<Vec<f64>>>()?;
        rows.push((vals[0], vals[2..].to_vec(), vals[1]));
    }
    if rows.is_empty() {
        return Err(Error::SchemaMismatch("state file has no rows".into()));
    }
    let mut traj = Trajectory::from_states(summary.field, summary.config, rows)?;
    traj.events
        .extend(summary.events.into_iter().filter(|e| matches!(e, Event::Halt { .. })));
    traj.stats = summary.stats;
    traj.next_dt = summary.next_dt;
    Ok(traj)
}

/// The per-sample CSV as numbers, with `p` inferred from the header.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTable {
    pub p: usize,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl TrajectoryTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

pub fn read_trajectory_table(path: impl AsRef<Path>) -> Result<TrajectoryTable> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(|s| s.to_string()).collect();
    if header.len() < 5 || (header.len() - 5) % 3 != 0 {
        return Err(Error::SchemaMismatch(format!(
            "{}: unexpected column count {}",
            path.display(),
            header.len()
        )));
    }
    let p = (header.len() - 5) / 3;
    if header != trajectory_header(p) {
        return Err(Error::SchemaMismatch(format!(
            "{}: header does not match the trajectory schema",
            path.display()
        )));
    }
    let mut rows = vec![];
    for rec in r.records() {
        let rec = rec?;
        rows.push(rec.iter().map(parse_f64).collect::<Result<Vec<f64>>>()?);
    }
    Ok(TrajectoryTable { p, header, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for x in [1.0 / 3.0, std::f64::consts::PI * 1e-300, -2.5e17, 0.1 + 0.2] {
            assert_eq!(parse_f64(&fmt_f64(x)).unwrap(), x);
        }
    }

    #[test]
    fn artifact_paths_from_any_suffix() {
        let a = ArtifactPaths::from_any("out/run_seed0.summary.json");
        let b = ArtifactPaths::from_any("out/run_seed0.csv");
        let c = ArtifactPaths::from_any("out/run_seed0.state.csv");
        assert_eq!(a, b);
        assert_eq!(b, c);
        assert_eq!(a.csv, PathBuf::from("out/run_seed0.csv"));
    }

    #[test]
    fn header_layout() {
        let h = trajectory_header(2);
        assert_eq!(
            h,
            vec!["t", "loss", "gamma", "int_gamma", "entropy", "sigma_0", "sigma_1", "u_0", "u_1", "a_0", "a_1"]
        );
    }
}
