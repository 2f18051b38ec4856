//! On-disk dataset layout shared by the simulator and the odometry runner:
//!
//! ```text
//! imu.csv              t,ax,ay,az,gx,gy,gz
//! sweeps.csv           index,t_begin,t_end
//! sweeps/NNNNNN.csv    t,x,y,z   (sensor frame)
//! gt.txt               trajectory lines, optional
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::evaluation::{read_trajectory, write_trajectory, EvalError, Trajectory};
use crate::geometry::Vec3;
use crate::imu::ImuSample;
use crate::preprocessing::{Sweep, TimedPoint};
use crate::simulator::SimulatedRun;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path} line {line}: {message}")]
    Format {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: {source}")]
    Trajectory { path: PathBuf, source: EvalError },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub sweeps: Vec<Sweep>,
    pub ground_truth: Option<Trajectory>,
}

pub const IMU_FILE: &str = "imu.csv";
pub const SWEEP_INDEX_FILE: &str = "sweeps.csv";
pub const SWEEP_DIR: &str = "sweeps";
pub const GT_FILE: &str = "gt.txt";

pub fn sweep_file_name(index: usize) -> String {
    format!("{index:06}.csv")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> DatasetError + '_ {
    move |source| DatasetError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a headed numeric CSV with exactly `columns` fields per row.
fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let format_err = |line: u64, message: String| DatasetError::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let found: Vec<String> = reader
        .headers()
        .map_err(csv_err(path))?
        .iter()
        .map(str::to_owned)
        .collect();
    if found != header {
        return Err(format_err(
            1,
            format!("expected header '{}'", header.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err(path))?;
        let line = record.position().map_or(0, |p| p.line());
        let row = record
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| format_err(line, format!("'{f}' is not a finite number")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn write_rows<I>(path: &Path, header: &[&str], rows: I) -> Result<(), DatasetError>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let file = File::create(path).map_err(io_err(path))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    writer.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        writer.write_record(&row).map_err(csv_err(path))?;
    }
    writer.flush().map_err(io_err(path))
}

pub fn read_imu(path: &Path) -> Result<Vec<ImuSample>, DatasetError> {
    Ok(read_rows(path, &["t", "ax", "ay", "az", "gx", "gy", "gz"])?
        .into_iter()
        .map(|r| ImuSample {
            timestamp: r[0],
            acc: Vec3::new(r[1], r[2], r[3]),
            gyro: Vec3::new(r[4], r[5], r[6]),
        })
        .collect())
}

pub fn write_imu(path: &Path, imu: &[ImuSample]) -> Result<(), DatasetError> {
    write_rows(
        path,
        &["t", "ax", "ay", "az", "gx", "gy", "gz"],
        imu.iter().map(|s| {
            [
                s.timestamp,
                s.acc.x,
                s.acc.y,
                s.acc.z,
                s.gyro.x,
                s.gyro.y,
                s.gyro.z,
            ]
            .iter()
            .map(f64::to_string)
            .collect()
        }),
    )
}

pub fn read_sweep_points(path: &Path) -> Result<Vec<TimedPoint>, DatasetError> {
    Ok(read_rows(path, &["t", "x", "y", "z"])?
        .into_iter()
        .map(|r| TimedPoint::new(Vec3::new(r[1], r[2], r[3]), r[0]))
        .collect())
}

pub fn write_sweep_points(path: &Path, points: &[TimedPoint]) -> Result<(), DatasetError> {
    write_rows(
        path,
        &["t", "x", "y", "z"],
        points.iter().map(|p| {
            [p.timestamp, p.position.x, p.position.y, p.position.z]
                .iter()
                .map(f64::to_string)
                .collect()
        }),
    )
}

/// Loads a dataset directory. `gt.txt` is optional.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let imu = read_imu(&dir.join(IMU_FILE))?;
    let index_path = dir.join(SWEEP_INDEX_FILE);
    let mut sweeps = Vec::new();
    for (row, r) in read_rows(&index_path, &["index", "t_begin", "t_end"])?
        .into_iter()
        .enumerate()
    {
        let index = r[0];
        if index < 0.0 || index.fract() != 0.0 || r[2] <= r[1] {
            return Err(DatasetError::Format {
                path: index_path,
                line: row as u64 + 2,
                message: "index must be a non-negative integer and t_end > t_begin".into(),
            });
        }
        let index = index as usize;
        let points = read_sweep_points(&dir.join(SWEEP_DIR).join(sweep_file_name(index)))?;
        sweeps.push(Sweep {
            index,
            t_begin: r[1],
            t_end: r[2],
            points,
        });
    }
    let gt_path = dir.join(GT_FILE);
    let ground_truth = if gt_path.exists() {
        Some(read_trajectory_file(&gt_path)?)
    } else {
        None
    };
    Ok(Dataset {
        imu,
        sweeps,
        ground_truth,
    })
}

pub fn read_trajectory_file(path: &Path) -> Result<Trajectory, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_trajectory(BufReader::new(file)).map_err(|source| DatasetError::Trajectory {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_trajectory_file(path: &Path, traj: &Trajectory) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    write_trajectory(traj, &mut out).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

/// Writes `imu`, `sweeps` and optional ground truth into `dir`, creating it.
pub fn write_dataset(
    dir: &Path,
    imu: &[ImuSample],
    sweeps: &[Sweep],
    ground_truth: Option<&Trajectory>,
) -> Result<(), DatasetError> {
    let sweep_dir = dir.join(SWEEP_DIR);
    fs::create_dir_all(&sweep_dir).map_err(io_err(&sweep_dir))?;
    write_imu(&dir.join(IMU_FILE), imu)?;
    write_rows(
        &dir.join(SWEEP_INDEX_FILE),
        &["index", "t_begin", "t_end"],
        sweeps.iter().map(|s| {
            vec![
                s.index.to_string(),
                s.t_begin.to_string(),
                s.t_end.to_string(),
            ]
        }),
    )?;
    for s in sweeps {
        write_sweep_points(&sweep_dir.join(sweep_file_name(s.index)), &s.points)?;
    }
    if let Some(gt) = ground_truth {
        write_trajectory_file(&dir.join(GT_FILE), gt)?;
    }
    Ok(())
}

/// Persists a simulated run with its ground truth at the sweep boundaries.
pub fn write_simulated(dir: &Path, run: &SimulatedRun) -> Result<(), DatasetError> {
    let gt =
        Trajectory::from_states(&run.ground_truth).map_err(|source| DatasetError::Trajectory {
            path: dir.join(GT_FILE),
            source,
        })?;
    write_dataset(dir, &run.imu, &run.sweeps, Some(&gt))
}
