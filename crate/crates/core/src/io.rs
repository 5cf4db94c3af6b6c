//! CSV writers and readers for trajectories, reward curves and evaluation
//! reports. Every file starts with a `#` comment line naming the tool
//! version and master seed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{Controller, VehicleId};
use crate::netgeom::RouteId;
use crate::sim::TrajectoryRecord;
use crate::transfer::{EvalCase, EvalReport, TrialResult};
use crate::trpo::IterationRecord;

pub const TOOL_NAME: &str = "rampmeter";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error in {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("bad value in {path}: {reason}")]
    Value { path: String, reason: String },
}

pub fn header_line(seed: u64) -> String {
    format!("# {TOOL_NAME} {VERSION} seed={seed}")
}

fn create(path: &Path, seed: u64) -> Result<csv::Writer<BufWriter<File>>, IoError> {
    let io = |source| IoError::Io { path: path.display().to_string(), source };
    let mut f = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(f, "{}", header_line(seed)).map_err(io)?;
    Ok(csv::Writer::from_writer(f))
}

fn write_rows<T: Serialize>(path: &Path, seed: u64, rows: impl IntoIterator<Item = T>) -> Result<(), IoError> {
    let csv_err = |source| IoError::Csv { path: path.display().to_string(), source };
    let mut w = create(path, seed)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|source| IoError::Io { path: path.display().to_string(), source })
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, IoError> {
    let csv_err = |source| IoError::Csv { path: path.display().to_string(), source };
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(csv_err)
}

/// Seed recorded in a file's header line, if present.
pub fn read_header_seed(path: &Path) -> Result<Option<u64>, IoError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::Io { path: path.display().to_string(), source })?;
    Ok(text
        .lines()
        .next()
        .filter(|l| l.starts_with('#'))
        .and_then(|l| l.split_whitespace().find_map(|w| w.strip_prefix("seed=")))
        .and_then(|s| s.parse().ok()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub time: f64,
    pub vehicle_id: u32,
    pub route: String,
    pub position_1d: f64,
    pub velocity: f64,
    pub controller: String,
}

impl From<&TrajectoryRecord> for TrajectoryRow {
    fn from(r: &TrajectoryRecord) -> Self {
        Self {
            time: r.time,
            vehicle_id: r.vehicle_id.0,
            route: r.route.as_str().to_string(),
            position_1d: r.position_1d,
            velocity: r.velocity,
            controller: r.controller.as_str().to_string(),
        }
    }
}

pub fn write_trajectory(path: &Path, seed: u64, records: &[TrajectoryRecord]) -> Result<(), IoError> {
    write_rows(path, seed, records.iter().map(TrajectoryRow::from))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRecord>, IoError> {
    let bad = |reason: String| IoError::Value { path: path.display().to_string(), reason };
    read_rows::<TrajectoryRow>(path)?
        .into_iter()
        .map(|r| {
            let route = RouteId::parse(&r.route).ok_or_else(|| bad(format!("unknown route {:?}", r.route)))?;
            let controller = match r.controller.as_str() {
                "idm" => Controller::Idm,
                "rl" => Controller::Rl,
                other => return Err(bad(format!("unknown controller {other:?}"))),
            };
            Ok(TrajectoryRecord {
                time: r.time,
                vehicle_id: VehicleId(r.vehicle_id),
                route,
                position_1d: r.position_1d,
                velocity: r.velocity,
                controller,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRow {
    pub iteration: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_kl: f64,
    pub steps: usize,
}

impl From<&IterationRecord> for RewardRow {
    fn from(r: &IterationRecord) -> Self {
        Self { iteration: r.iteration, mean_return: r.mean_return, std_return: r.std_return, mean_kl: r.mean_kl, steps: r.steps }
    }
}

pub fn write_reward_curve(path: &Path, seed: u64, curve: &[IterationRecord]) -> Result<(), IoError> {
    write_rows(path, seed, curve.iter().map(RewardRow::from))
}

/// Incremental writer so a long run leaves a usable curve behind.
pub struct RewardCurveWriter {
    path: String,
    inner: csv::Writer<BufWriter<File>>,
}

impl RewardCurveWriter {
    pub fn create(path: &Path, seed: u64) -> Result<Self, IoError> {
        let mut inner = create(path, seed)?;
        let path_s = path.display().to_string();
        inner
            .write_record(["iteration", "mean_return", "std_return", "mean_kl", "steps"])
            .map_err(|source| IoError::Csv { path: path_s.clone(), source })?;
        Ok(Self { path: path_s, inner })
    }

    pub fn append(&mut self, r: &IterationRecord) -> Result<(), IoError> {
        let row = RewardRow::from(r);
        self.inner
            .write_record([
                row.iteration.to_string(),
                row.mean_return.to_string(),
                row.std_return.to_string(),
                row.mean_kl.to_string(),
                row.steps.to_string(),
            ])
            .map_err(|source| IoError::Csv { path: self.path.clone(), source })?;
        self.inner.flush().map_err(|source| IoError::Io { path: self.path.clone(), source })
    }
}

pub fn read_reward_curve(path: &Path) -> Result<Vec<RewardRow>, IoError> {
    read_rows(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub case: EvalCase,
    pub avg_velocity: f64,
    pub avg_time: f64,
    pub max_time: f64,
    pub collisions: usize,
    pub trials: usize,
}

impl From<&EvalReport> for ReportRow {
    fn from(r: &EvalReport) -> Self {
        Self {
            case: r.case,
            avg_velocity: r.avg_velocity,
            avg_time: r.avg_time,
            max_time: r.max_time,
            collisions: r.collisions,
            trials: r.trials,
        }
    }
}

pub fn write_report(path: &Path, seed: u64, reports: &[EvalReport]) -> Result<(), IoError> {
    write_rows(path, seed, reports.iter().map(ReportRow::from))
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>, IoError> {
    read_rows(path)
}

/// One trial of one evaluation case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub case: EvalCase,
    pub trial: usize,
    pub seed: u64,
    pub avg_velocity: f64,
    pub avg_time: f64,
    pub max_time: f64,
    pub collisions: usize,
    pub metering_score: f64,
}

impl TrialRow {
    pub fn new(case: EvalCase, t: &TrialResult) -> Self {
        Self {
            case,
            trial: t.trial,
            seed: t.seed,
            avg_velocity: t.metrics.avg_velocity,
            avg_time: t.metrics.avg_travel_time,
            max_time: t.metrics.max_travel_time,
            collisions: t.metrics.collisions,
            metering_score: t.metering_score,
        }
    }
}

pub fn write_trials(path: &Path, seed: u64, rows: &[TrialRow]) -> Result<(), IoError> {
    write_rows(path, seed, rows)
}

pub fn read_trials(path: &Path) -> Result<Vec<TrialRow>, IoError> {
    read_rows(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeRow {
    pub time: f64,
    pub vehicle_id: u32,
    pub route: String,
    pub position_1d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityProfileRow {
    pub vehicle_id: u32,
    pub route: String,
    pub position_1d: f64,
    pub velocity: f64,
}

/// Space-time (position over time per vehicle) and velocity-over-position
/// tables derived from a trajectory log.
pub fn write_plot_tables(
    space_time: &Path,
    velocity_profile: &Path,
    seed: u64,
    records: &[TrajectoryRecord],
) -> Result<(), IoError> {
    write_rows(
        space_time,
        seed,
        records.iter().map(|r| SpaceTimeRow {
            time: r.time,
            vehicle_id: r.vehicle_id.0,
            route: r.route.as_str().to_string(),
            position_1d: r.position_1d,
        }),
    )?;
    let mut sorted: Vec<&TrajectoryRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.vehicle_id.cmp(&b.vehicle_id).then(a.time.total_cmp(&b.time)));
    write_rows(
        velocity_profile,
        seed,
        sorted.into_iter().map(|r| VelocityProfileRow {
            vehicle_id: r.vehicle_id.0,
            route: r.route.as_str().to_string(),
            position_1d: r.position_1d,
            velocity: r.velocity,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let recs = vec![
            TrajectoryRecord { time: 1.0, vehicle_id: VehicleId(3), route: RouteId::North, position_1d: 80.125, velocity: 1.5, controller: Controller::Rl },
            TrajectoryRecord { time: 2.0, vehicle_id: VehicleId(4), route: RouteId::West, position_1d: 0.1 + 0.2, velocity: 0.0, controller: Controller::Idm },
        ];
        write_trajectory(&p, 17, &recs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(&format!("# rampmeter {VERSION} seed=17\ntime,vehicle_id,route,position_1d,velocity,controller\n")));
        assert_eq!(read_trajectory(&p).unwrap(), recs);
        assert_eq!(read_header_seed(&p).unwrap(), Some(17));
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rep = EvalReport {
            case: EvalCase::RlNoiseTrained,
            avg_velocity: 7.5,
            avg_time: 40.0,
            max_time: 52.0,
            collisions: 0,
            trials: 3,
            metering_score: 0.0,
        };
        write_report(&p, 1, &[rep.clone()]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().nth(1).unwrap() == "case,avg_velocity,avg_time,max_time,collisions,trials");
        assert_eq!(read_report(&p).unwrap(), vec![ReportRow::from(&rep)]);
    }
}
