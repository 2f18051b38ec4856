//! Batch commands behind the command-line tool.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::dataset::{
    read_dataset, read_trajectory_file, write_simulated, write_trajectory_file, Dataset,
    DatasetError,
};
use crate::estimator::Mode;
use crate::evaluation::{evaluate, EvalError, MetricsReport, Trajectory};
use crate::geometry::NavState;
use crate::pipeline::{run, PipelineError, RunOutput};
use crate::simulator::{simulate, SimError};

pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const STATES_FILE: &str = "states.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const METRICS_FILE: &str = "metrics.txt";
pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("simulation failed: {0}")]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("evaluation failed: {0}")]
    Evaluation(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("no ground truth in {0}")]
    MissingGroundTruth(PathBuf),
}

impl AppError {
    /// Process exit status: 1 usage, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 1,
            AppError::Pipeline(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }

    /// Short machine-readable class name used as the error prefix.
    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            1 => "usage",
            3 => "numerical",
            _ => "data",
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), AppError> {
    fs::write(path, contents).map_err(|source| AppError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), AppError> {
    fs::create_dir_all(path).map_err(|source| AppError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSummary {
    pub directory: PathBuf,
    pub sweeps: usize,
    pub imu_samples: usize,
}

/// Synthesizes the configured scenario into the output directory.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulateSummary, AppError> {
    cfg.validate()?;
    let run = simulate(&cfg.simulation_config())?;
    write_simulated(&cfg.output, &run)?;
    info!(
        "wrote {} sweeps to {}",
        run.sweeps.len(),
        cfg.output.display()
    );
    Ok(SimulateSummary {
        directory: cfg.output.clone(),
        sweeps: run.sweeps.len(),
        imu_samples: run.imu.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub sweeps: usize,
    pub fallbacks: usize,
    /// Present when the dataset carries ground truth.
    pub metrics: Option<MetricsReport>,
}

const STATE_COLUMNS: [&str; 17] = [
    "t", "tx", "ty", "tz", "qx", "qy", "qz", "qw", "vx", "vy", "vz", "bax", "bay", "baz", "bgx",
    "bgy", "bgz",
];

fn state_row(s: &NavState) -> String {
    let q = s.rotation.quaternion();
    let (t, v, ba, bg) = (s.translation, s.velocity, s.bias_acc, s.bias_gyro);
    [
        s.timestamp,
        t.x,
        t.y,
        t.z,
        q.i,
        q.j,
        q.k,
        q.w,
        v.x,
        v.y,
        v.z,
        ba.x,
        ba.y,
        ba.z,
        bg.x,
        bg.y,
        bg.z,
    ]
    .iter()
    .map(|v| format!("{v:.12e}"))
    .collect::<Vec<_>>()
    .join(",")
}

/// Begin and end state of every sweep, one row per sweep.
pub fn states_csv(out: &RunOutput) -> String {
    let mut text = String::from("index");
    for prefix in ["b", "e"] {
        for c in STATE_COLUMNS {
            let _ = write!(text, ",{prefix}_{c}");
        }
    }
    text.push('\n');
    for r in &out.records {
        let _ = writeln!(
            text,
            "{},{},{}",
            r.index,
            state_row(&r.estimate.x_b),
            state_row(&r.carried)
        );
    }
    text
}

/// Per-sweep solver diagnostics, including wall-clock timing.
pub fn diagnostics_csv(out: &RunOutput) -> String {
    let mut text = String::from(
        "index,mode,points,associations,outer_iterations,iterations,converged,fallback,cost,cost_point,cost_imu,cost_logical,elapsed_ms\n",
    );
    for r in &out.records {
        let e = &r.estimate;
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.3}",
            r.index,
            e.mode,
            r.points,
            e.associations,
            e.outer_iterations,
            e.iterations,
            e.converged,
            e.fallback,
            e.cost,
            e.breakdown.point,
            e.breakdown.imu,
            e.breakdown.logical,
            r.elapsed.as_secs_f64() * 1e3,
        );
    }
    text
}

fn estimated_trajectory(out: &RunOutput) -> Result<Trajectory, AppError> {
    Ok(Trajectory::from_states(&out.end_states())?)
}

fn run_into(
    cfg: &RunConfig,
    data: &Dataset,
    dir: &Path,
) -> Result<(RunOutput, Option<MetricsReport>), AppError> {
    let out = run(&data.imu, &data.sweeps, &cfg.pipeline)?;
    create_dir(dir)?;
    let est = estimated_trajectory(&out)?;
    write_trajectory_file(&dir.join(TRAJECTORY_FILE), &est)?;
    write_file(&dir.join(STATES_FILE), &states_csv(&out))?;
    write_file(&dir.join(DIAGNOSTICS_FILE), &diagnostics_csv(&out))?;
    let metrics = match &data.ground_truth {
        Some(gt) => {
            let m = evaluate(&est, gt, cfg.align)?;
            write_file(&dir.join(METRICS_FILE), &format!("{m}\n"))?;
            Some(m)
        }
        None => None,
    };
    Ok((out, metrics))
}

/// Runs odometry over the configured dataset and writes the trajectory,
/// per-sweep states and diagnostics into the output directory.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunSummary, AppError> {
    cfg.validate()?;
    let data = read_dataset(&cfg.dataset)?;
    let (out, metrics) = run_into(cfg, &data, &cfg.output)?;
    Ok(RunSummary {
        sweeps: out.records.len(),
        fallbacks: out.records.iter().filter(|r| r.estimate.fallback).count(),
        metrics,
    })
}

/// Metrics of an estimated trajectory file against a ground-truth file.
pub fn cmd_evaluate(est: &Path, gt: &Path, align: bool) -> Result<MetricsReport, AppError> {
    let est = read_trajectory_file(est)?;
    let gt = read_trajectory_file(gt)?;
    Ok(evaluate(&est, &gt, align)?)
}

/// Runs every estimation mode on the same dataset. Each mode writes into
/// `output/<mode>/`; a summary table goes to `output/ablation.csv`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<(Mode, MetricsReport)>, AppError> {
    cfg.validate()?;
    let data = read_dataset(&cfg.dataset)?;
    if data.ground_truth.is_none() {
        return Err(AppError::MissingGroundTruth(cfg.dataset.clone()));
    }
    let mut rows = Vec::new();
    for mode in Mode::ALL {
        let mut mode_cfg = cfg.clone();
        mode_cfg.pipeline.estimator.mode = mode;
        let (_, metrics) = run_into(&mode_cfg, &data, &cfg.output.join(mode.to_string()))?;
        if let Some(m) = metrics {
            rows.push((mode, m));
        }
    }
    let mut table = String::from("mode,samples,ate_rmse,velocity_smoothness,zigzag_score\n");
    for (mode, m) in &rows {
        let smooth = m
            .velocity_smoothness
            .map_or("nan".into(), |v| format!("{v:.9e}"));
        let _ = writeln!(
            table,
            "{mode},{},{:.9},{smooth},{:.9}",
            m.samples, m.ate_rmse, m.zigzag_score
        );
    }
    write_file(&cfg.output.join(ABLATION_FILE), &table)?;
    Ok(rows)
}
