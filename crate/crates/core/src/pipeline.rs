//! Sweep-by-sweep odometry: initialization, prediction, optimization and
//! map registration.

use std::time::{Duration, Instant};

use log::{debug, warn};
use thiserror::Error;

use crate::estimator::{
    optimize, predict, EstimatorConfig, EstimatorError, Mode, SweepEstimate, SweepInput,
};
use crate::geometry::{interpolate_pose_unchecked, NavState, Pose, Vec3};
use crate::imu::{imu_window, integrate, ImuError, ImuNoiseModel, ImuSample, Preintegration};
use crate::initialization::{static_init, InitConfig, InitError, InitResult};
use crate::preprocessing::{quantitative_downsample_every, voxel_downsample, Sweep, TimedPoint};
use crate::voxel_map::{VoxelMap, VoxelMapConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("initialization failed: {0}")]
    Init(#[from] InitError),
    #[error("no sweep ends at or after the initialization time {0:.6}")]
    NoSweepAfterInit(f64),
    #[error("sweep {index} begins at {t_begin:.6} but the previous sweep ended at {prev_end:.6}")]
    Misaligned {
        index: usize,
        t_begin: f64,
        prev_end: f64,
    },
    #[error("sweep {index}: {source}")]
    Imu { index: usize, source: ImuError },
    #[error("sweep {index}: {source}")]
    Estimator {
        index: usize,
        source: EstimatorError,
    },
    #[error("sweep {index}: estimate is not finite")]
    NonFinite { index: usize },
}

impl PipelineError {
    /// True for failures of the numerical core rather than of the input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            PipelineError::NonFinite { .. }
                | PipelineError::Estimator {
                    source: EstimatorError::Numerical,
                    ..
                }
        )
    }
}

/// Offset added to the carried-forward end state of one sweep after it has
/// been registered, emulating a locally wrong estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corruption {
    pub sweep: usize,
    pub offset: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub estimator: EstimatorConfig,
    pub init: InitConfig,
    pub noise: ImuNoiseModel,
    pub map: VoxelMapConfig,
    /// Keep every n-th raw point.
    pub quantitative_step: usize,
    pub downsample_voxel: f64,
    pub prune_distance: f64,
    /// LiDAR pose in the IMU frame.
    pub extrinsic: Pose,
    pub corruption: Option<Corruption>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorConfig::default(),
            init: InitConfig::default(),
            noise: ImuNoiseModel::default(),
            map: VoxelMapConfig {
                min_point_distance: 0.1,
                ..VoxelMapConfig::default()
            },
            quantitative_step: 4,
            downsample_voxel: 0.5,
            prune_distance: 500.0,
            extrinsic: Pose::identity(),
            corruption: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub index: usize,
    pub t_begin: f64,
    pub t_end: f64,
    /// Previous end state as carried into this sweep.
    pub prev_end: NavState,
    pub estimate: SweepEstimate,
    /// End state handed to the next sweep (differs from `estimate.x_e` only
    /// under corruption).
    pub carried: NavState,
    pub points: usize,
    pub elapsed: Duration,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub init: InitResult,
    pub records: Vec<SweepRecord>,
    pub map: VoxelMap,
}

impl RunOutput {
    /// End state of every sweep, as carried forward.
    pub fn end_states(&self) -> Vec<NavState> {
        self.records.iter().map(|r| r.carried).collect()
    }
}

fn preprocess(sweep: &Sweep, cfg: &PipelineConfig) -> Sweep {
    let thinned = quantitative_downsample_every(&sweep.points, cfg.quantitative_step.max(1));
    sweep.with_points(voxel_downsample(&thinned, cfg.downsample_voxel))
}

/// World-frame points of a sweep under the given begin/end estimates.
fn register_points(
    sweep: &Sweep,
    imu: &[ImuSample],
    pre: &Preintegration,
    est: &SweepEstimate,
    cfg: &PipelineConfig,
    gravity: &Vec3,
) -> Result<Vec<Vec3>, EstimatorError> {
    if est.mode == Mode::Elastic {
        let lb = est.x_b.pose().compose(&cfg.extrinsic);
        let le = est.x_e.pose().compose(&cfg.extrinsic);
        return Ok(sweep
            .points
            .iter()
            .map(|p| {
                interpolate_pose_unchecked(&lb, &le, sweep.alpha(p.timestamp))
                    .transform_point(&p.position)
            })
            .collect());
    }
    let input = SweepInput {
        sweep,
        imu,
        preintegration: pre,
        prev_end: est.x_b,
        prediction: (est.x_b, est.x_e),
        gravity: *gravity,
        extrinsic: cfg.extrinsic,
    };
    let pose = est.x_e.pose();
    Ok(
        crate::estimator::undistort_with(&input, cfg.estimator.undistort, &est.x_b, &est.x_e)?
            .iter()
            .map(|p: &TimedPoint| pose.transform_point(&p.position))
            .collect(),
    )
}

/// Incremental odometry state between sweeps. Cloning it forks the map and
/// the carried end state, so alternative configurations can be compared on
/// identical inputs.
#[derive(Debug, Clone)]
pub struct Odometry<'a> {
    imu: &'a [ImuSample],
    cfg: PipelineConfig,
    gravity: Vec3,
    map: VoxelMap,
    prev: NavState,
}

impl<'a> Odometry<'a> {
    /// Anchors the map with `sweep`, registered at the initialization state
    /// while the platform is still at rest.
    pub fn new(
        imu: &'a [ImuSample],
        init: &InitResult,
        sweep: &Sweep,
        cfg: &PipelineConfig,
    ) -> (Self, SweepRecord) {
        let start = Instant::now();
        let mut prev = init.state;
        prev.timestamp = sweep.t_end;
        let anchor = preprocess(sweep, cfg);
        let lidar = prev.pose().compose(&cfg.extrinsic);
        let pts: Vec<Vec3> = anchor
            .points
            .iter()
            .map(|p| lidar.transform_point(&p.position))
            .collect();
        let mut map = VoxelMap::new(cfg.map);
        map.insert(&pts);
        let record = SweepRecord {
            index: sweep.index,
            t_begin: sweep.t_begin,
            t_end: sweep.t_end,
            prev_end: prev,
            estimate: SweepEstimate {
                x_b: prev,
                x_e: prev,
                mode: cfg.estimator.mode,
                outer_iterations: 0,
                iterations: 0,
                cost: 0.0,
                breakdown: Default::default(),
                converged: true,
                fallback: false,
                associations: 0,
                cost_history: Vec::new(),
            },
            carried: prev,
            points: anchor.points.len(),
            elapsed: start.elapsed(),
        };
        let odo = Self {
            imu,
            cfg: *cfg,
            gravity: init.gravity,
            map,
            prev,
        };
        (odo, record)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Changes the configuration for subsequent sweeps. The map keeps its
    /// original layout.
    pub fn config_mut(&mut self) -> &mut PipelineConfig {
        &mut self.cfg
    }

    /// End state carried into the next sweep.
    pub fn prev_end(&self) -> &NavState {
        &self.prev
    }

    /// Replaces the carried end state, e.g. to inject a wrong estimate.
    pub fn set_prev_end(&mut self, state: NavState) {
        self.prev = state;
    }

    pub fn map(&self) -> &VoxelMap {
        &self.map
    }

    pub fn into_map(self) -> VoxelMap {
        self.map
    }

    /// Estimates the states of the sweep following the previous one and
    /// registers its points into the map.
    pub fn step(&mut self, raw: &Sweep) -> Result<SweepRecord, PipelineError> {
        let start = Instant::now();
        let cfg = &self.cfg;
        let prev = self.prev;
        let index = raw.index;
        if (raw.t_begin - prev.timestamp).abs() > 1e-6 {
            return Err(PipelineError::Misaligned {
                index,
                t_begin: raw.t_begin,
                prev_end: prev.timestamp,
            });
        }
        let mut sweep = preprocess(raw, cfg);
        sweep.t_begin = prev.timestamp;
        for p in &mut sweep.points {
            p.timestamp = p.timestamp.clamp(sweep.t_begin, sweep.t_end);
        }
        let imu_err = |source| PipelineError::Imu { index, source };
        let window = imu_window(self.imu, sweep.t_begin, sweep.t_end).map_err(imu_err)?;
        let prediction = predict(&prev, &window, &self.gravity).map_err(imu_err)?;
        let pre =
            integrate(&window, &prev.bias_acc, &prev.bias_gyro, &cfg.noise).map_err(imu_err)?;
        let input = SweepInput {
            sweep: &sweep,
            imu: &window,
            preintegration: &pre,
            prev_end: prev,
            prediction,
            gravity: self.gravity,
            extrinsic: cfg.extrinsic,
        };
        let estimate = match optimize(&input, &self.map, &cfg.estimator) {
            Ok(e) => e,
            Err(EstimatorError::DegenerateGeometry {
                found, fallback, ..
            }) => {
                warn!("sweep {index}: only {found} associations, keeping the prediction");
                *fallback
            }
            Err(source) => return Err(PipelineError::Estimator { index, source }),
        };
        if !estimate.x_b.is_finite() || !estimate.x_e.is_finite() {
            return Err(PipelineError::NonFinite { index });
        }
        debug!(
            "sweep {index}: mode={} iterations={} cost={:.6e} associations={}",
            estimate.mode, estimate.iterations, estimate.cost, estimate.associations
        );

        let world = register_points(&sweep, &window, &pre, &estimate, cfg, &self.gravity)
            .map_err(|source| PipelineError::Estimator { index, source })?;
        self.map.insert(&world);
        self.map
            .prune(&estimate.x_e.translation, cfg.prune_distance);

        let mut carried = estimate.x_e;
        if let Some(c) = cfg.corruption.filter(|c| c.sweep == index) {
            carried.translation += c.offset;
        }
        self.prev = carried;
        Ok(SweepRecord {
            index,
            t_begin: sweep.t_begin,
            t_end: sweep.t_end,
            prev_end: prev,
            estimate,
            carried,
            points: sweep.points.len(),
            elapsed: start.elapsed(),
        })
    }
}

/// Index of the first sweep ending at or after the initialization time.
pub fn first_sweep(sweeps: &[Sweep], init: &InitResult) -> Result<usize, PipelineError> {
    let t_init = init.state.timestamp;
    sweeps
        .iter()
        .position(|s| s.t_end >= t_init - 1e-6)
        .ok_or(PipelineError::NoSweepAfterInit(t_init))
}

/// Runs odometry over `sweeps` (time-ordered, contiguous) using `imu`.
pub fn run(
    imu: &[ImuSample],
    sweeps: &[Sweep],
    cfg: &PipelineConfig,
) -> Result<RunOutput, PipelineError> {
    let init = static_init(imu, &cfg.init, &cfg.noise)?;
    let first = first_sweep(sweeps, &init)?;
    let (mut odo, anchor) = Odometry::new(imu, &init, &sweeps[first], cfg);
    let mut records = Vec::with_capacity(sweeps.len() - first);
    records.push(anchor);
    for raw in &sweeps[first + 1..] {
        records.push(odo.step(raw)?);
    }
    Ok(RunOutput {
        init,
        records,
        map: odo.into_map(),
    })
}
