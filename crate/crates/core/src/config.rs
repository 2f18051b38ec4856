//! Flat `key = value` run configuration with embedded defaults.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::geometry::{Pose, Rotation, Vec3};
use crate::pipeline::{Corruption, PipelineConfig};
use crate::simulator::{Motion, SimulationConfig, TrajectorySpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected 'key = value'")]
    Syntax { line: usize },
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error("bad value for '{key}': {message}")]
    BadValue { key: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Trajectory family used by the simulate command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionKind {
    Stationary,
    Circular,
    FigureEight,
    ConstantTwist,
}

impl std::fmt::Display for MotionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MotionKind::Stationary => "stationary",
            MotionKind::Circular => "circular",
            MotionKind::FigureEight => "figure-eight",
            MotionKind::ConstantTwist => "constant-twist",
        })
    }
}

impl FromStr for MotionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stationary" => Ok(MotionKind::Stationary),
            "circular" => Ok(MotionKind::Circular),
            "figure-eight" => Ok(MotionKind::FigureEight),
            "constant-twist" => Ok(MotionKind::ConstantTwist),
            _ => Err(format!(
                "expected stationary, circular, figure-eight or constant-twist, got '{s}'"
            )),
        }
    }
}

/// Scenario parameters for the simulate command. Sensor noise levels are
/// shared with the estimator's noise model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationParams {
    pub motion: MotionKind,
    pub duration: f64,
    pub hold: f64,
    pub ramp: f64,
    pub radius: f64,
    pub speed: f64,
    pub size: f64,
    pub turn_rate: f64,
    pub twist_velocity: Vec3,
    pub twist_omega: Vec3,
    pub noisy: bool,
    pub range_sigma: f64,
    pub imu_rate: f64,
    pub sweep_rate: f64,
    pub rings: usize,
    pub min_elevation: f64,
    pub max_elevation: f64,
    pub azimuth_steps: usize,
}

impl Default for SimulationParams {
    fn default() -> Self {
        let sim = SimulationConfig::default();
        let traj = sim.trajectory;
        let Motion::Circular { radius, speed } = traj.motion else {
            unreachable!("the default scenario is circular")
        };
        Self {
            motion: MotionKind::Circular,
            duration: traj.duration,
            hold: traj.hold,
            ramp: traj.ramp,
            radius,
            speed,
            size: 4.0,
            turn_rate: 0.4,
            twist_velocity: Vec3::new(1.0, 0.0, 0.0),
            twist_omega: Vec3::new(0.0, 0.0, 0.2),
            noisy: true,
            range_sigma: sim.range_sigma,
            imu_rate: sim.imu_rate,
            sweep_rate: sim.sweep_rate,
            rings: sim.pattern.rings,
            min_elevation: sim.pattern.min_elevation,
            max_elevation: sim.pattern.max_elevation,
            azimuth_steps: sim.pattern.azimuth_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub simulation: SimulationParams,
    pub seed: u64,
    /// Rigidly align estimate to ground truth before computing ATE.
    pub align: bool,
    pub dataset: PathBuf,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            simulation: SimulationParams::default(),
            seed: 0,
            align: true,
            dataset: PathBuf::from("dataset"),
            output: PathBuf::from("output"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        message: e.to_string(),
    })
}

fn parse_floats(key: &str, value: &str, n: usize) -> Result<Vec<f64>, ConfigError> {
    let vals = value
        .split_whitespace()
        .map(|v| parse::<f64>(key, v))
        .collect::<Result<Vec<_>, _>>()?;
    if vals.len() != n {
        return Err(ConfigError::BadValue {
            key: key.into(),
            message: format!("expected {n} numbers, got {}", vals.len()),
        });
    }
    Ok(vals)
}

fn parse_vec3(key: &str, value: &str) -> Result<Vec3, ConfigError> {
    let v = parse_floats(key, value, 3)?;
    Ok(Vec3::new(v[0], v[1], v[2]))
}

fn fmt_vec3(v: &Vec3) -> String {
    format!("{} {} {}", v.x, v.y, v.z)
}

impl RunConfig {
    /// Parses config text on top of the defaults. Blank lines and `#`
    /// comments are ignored; later keys override earlier ones.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets a single key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let p = &mut self.pipeline;
        let e = &mut p.estimator;
        let s = &mut self.simulation;
        match key {
            "mode" => e.mode = parse(key, value)?,
            "undistort" => e.undistort = parse(key, value)?,
            "max_outer_iterations" => e.max_outer_iterations = parse(key, value)?,
            "max_inner_iterations" => e.max_inner_iterations = parse(key, value)?,
            "tolerance" => e.tolerance = parse(key, value)?,
            "huber_delta" => e.huber_delta = parse(key, value)?,
            "point_variance" => e.point_variance = parse(key, value)?,
            "logical_weight" => e.logical_weight = parse(key, value)?,
            "neighbor_count" => e.neighbor_count = parse(key, value)?,
            "min_plane_neighbors" => e.min_plane_neighbors = parse(key, value)?,
            "max_plane_distance" => e.max_plane_distance = parse(key, value)?,
            "max_plane_spread" => e.max_plane_spread = parse(key, value)?,
            "planarity_weight" => e.planarity_weight = parse(key, value)?,
            "reundistort_each_iteration" => e.reundistort_each_iteration = parse(key, value)?,
            "min_associations" => e.min_associations = parse(key, value)?,
            "quantitative_step" => p.quantitative_step = parse(key, value)?,
            "downsample_voxel" => p.downsample_voxel = parse(key, value)?,
            "map_voxel_size" => p.map.voxel_size = parse(key, value)?,
            "map_voxel_capacity" => p.map.capacity = parse(key, value)?,
            "map_search_radius" => p.map.search_radius = parse(key, value)?,
            "map_min_point_distance" => p.map.min_point_distance = parse(key, value)?,
            "prune_distance" => p.prune_distance = parse(key, value)?,
            "sigma_acc" => p.noise.sigma_acc = parse(key, value)?,
            "sigma_gyro" => p.noise.sigma_gyro = parse(key, value)?,
            "sigma_acc_bias" => p.noise.sigma_acc_bias = parse(key, value)?,
            "sigma_gyro_bias" => p.noise.sigma_gyro_bias = parse(key, value)?,
            "gravity_norm" => p.noise.gravity_norm = parse(key, value)?,
            "init_window" => p.init.window = parse(key, value)?,
            "init_max_accel_variance" => p.init.max_accel_variance = parse(key, value)?,
            "extrinsic" => {
                let v = parse_floats(key, value, 7)?;
                let q = Rotation::from_wxyz(v[6], v[3], v[4], v[5]);
                p.extrinsic = Pose::new(q, Vec3::new(v[0], v[1], v[2]));
            }
            "corrupt_sweep" => {
                let sweep: i64 = parse(key, value)?;
                let offset = p.corruption.map(|c| c.offset).unwrap_or_else(Vec3::zeros);
                p.corruption = usize::try_from(sweep)
                    .ok()
                    .map(|sweep| Corruption { sweep, offset });
            }
            "corrupt_offset" => {
                let offset = parse_vec3(key, value)?;
                if let Some(c) = &mut p.corruption {
                    c.offset = offset;
                } else if offset != Vec3::zeros() {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        message: "set corrupt_sweep first".into(),
                    });
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "align" => self.align = parse(key, value)?,
            "dataset" => self.dataset = PathBuf::from(value),
            "output" => self.output = PathBuf::from(value),
            "motion" => s.motion = parse(key, value)?,
            "duration" => s.duration = parse(key, value)?,
            "hold" => s.hold = parse(key, value)?,
            "ramp" => s.ramp = parse(key, value)?,
            "radius" => s.radius = parse(key, value)?,
            "speed" => s.speed = parse(key, value)?,
            "size" => s.size = parse(key, value)?,
            "turn_rate" => s.turn_rate = parse(key, value)?,
            "twist_velocity" => s.twist_velocity = parse_vec3(key, value)?,
            "twist_omega" => s.twist_omega = parse_vec3(key, value)?,
            "noisy" => s.noisy = parse(key, value)?,
            "range_sigma" => s.range_sigma = parse(key, value)?,
            "imu_rate" => s.imu_rate = parse(key, value)?,
            "sweep_rate" => s.sweep_rate = parse(key, value)?,
            "rings" => s.rings = parse(key, value)?,
            "min_elevation" => s.min_elevation = parse(key, value)?,
            "max_elevation" => s.max_elevation = parse(key, value)?,
            "azimuth_steps" => s.azimuth_steps = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Every key with its current value, in print order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p = &self.pipeline;
        let e = &p.estimator;
        let s = &self.simulation;
        let (t, q) = (p.extrinsic.translation, p.extrinsic.rotation.quaternion());
        let corruption = p.corruption;
        vec![
            ("mode", e.mode.to_string()),
            ("undistort", e.undistort.to_string()),
            ("max_outer_iterations", e.max_outer_iterations.to_string()),
            ("max_inner_iterations", e.max_inner_iterations.to_string()),
            ("tolerance", e.tolerance.to_string()),
            ("huber_delta", e.huber_delta.to_string()),
            ("point_variance", e.point_variance.to_string()),
            ("logical_weight", e.logical_weight.to_string()),
            ("neighbor_count", e.neighbor_count.to_string()),
            ("min_plane_neighbors", e.min_plane_neighbors.to_string()),
            ("max_plane_distance", e.max_plane_distance.to_string()),
            ("max_plane_spread", e.max_plane_spread.to_string()),
            ("planarity_weight", e.planarity_weight.to_string()),
            (
                "reundistort_each_iteration",
                e.reundistort_each_iteration.to_string(),
            ),
            ("min_associations", e.min_associations.to_string()),
            ("quantitative_step", p.quantitative_step.to_string()),
            ("downsample_voxel", p.downsample_voxel.to_string()),
            ("map_voxel_size", p.map.voxel_size.to_string()),
            ("map_voxel_capacity", p.map.capacity.to_string()),
            ("map_search_radius", p.map.search_radius.to_string()),
            (
                "map_min_point_distance",
                p.map.min_point_distance.to_string(),
            ),
            ("prune_distance", p.prune_distance.to_string()),
            ("sigma_acc", p.noise.sigma_acc.to_string()),
            ("sigma_gyro", p.noise.sigma_gyro.to_string()),
            ("sigma_acc_bias", p.noise.sigma_acc_bias.to_string()),
            ("sigma_gyro_bias", p.noise.sigma_gyro_bias.to_string()),
            ("gravity_norm", p.noise.gravity_norm.to_string()),
            ("init_window", p.init.window.to_string()),
            (
                "init_max_accel_variance",
                p.init.max_accel_variance.to_string(),
            ),
            (
                "extrinsic",
                format!("{} {} {} {} {} {} {}", t.x, t.y, t.z, q.i, q.j, q.k, q.w),
            ),
            (
                "corrupt_sweep",
                corruption.map_or("-1".into(), |c| c.sweep.to_string()),
            ),
            (
                "corrupt_offset",
                fmt_vec3(&corruption.map_or_else(Vec3::zeros, |c| c.offset)),
            ),
            ("seed", self.seed.to_string()),
            ("align", self.align.to_string()),
            ("dataset", self.dataset.display().to_string()),
            ("output", self.output.display().to_string()),
            ("motion", s.motion.to_string()),
            ("duration", s.duration.to_string()),
            ("hold", s.hold.to_string()),
            ("ramp", s.ramp.to_string()),
            ("radius", s.radius.to_string()),
            ("speed", s.speed.to_string()),
            ("size", s.size.to_string()),
            ("turn_rate", s.turn_rate.to_string()),
            ("twist_velocity", fmt_vec3(&s.twist_velocity)),
            ("twist_omega", fmt_vec3(&s.twist_omega)),
            ("noisy", s.noisy.to_string()),
            ("range_sigma", s.range_sigma.to_string()),
            ("imu_rate", s.imu_rate.to_string()),
            ("sweep_rate", s.sweep_rate.to_string()),
            ("rings", s.rings.to_string()),
            ("min_elevation", s.min_elevation.to_string()),
            ("max_elevation", s.max_elevation.to_string()),
            ("azimuth_steps", s.azimuth_steps.to_string()),
        ]
    }

    /// Config text that parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, value) in self.entries() {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.pipeline;
        let e = &p.estimator;
        let s = &self.simulation;
        let checks = [
            (
                p.noise.is_valid(),
                "noise densities must be non-negative and gravity positive",
            ),
            (e.point_variance > 0.0, "point_variance must be positive"),
            (
                e.logical_weight >= 0.0,
                "logical_weight must be non-negative",
            ),
            (e.huber_delta > 0.0, "huber_delta must be positive"),
            (
                e.neighbor_count >= e.min_plane_neighbors,
                "neighbor_count below min_plane_neighbors",
            ),
            (
                e.min_plane_neighbors >= 3,
                "min_plane_neighbors must be at least 3",
            ),
            (
                p.quantitative_step >= 1,
                "quantitative_step must be at least 1",
            ),
            (
                p.downsample_voxel > 0.0,
                "downsample_voxel must be positive",
            ),
            (p.map.voxel_size > 0.0, "map_voxel_size must be positive"),
            (p.map.capacity >= 1, "map_voxel_capacity must be at least 1"),
            (
                p.map.search_radius >= 0,
                "map_search_radius must be non-negative",
            ),
            (
                p.map.min_point_distance >= 0.0,
                "map_min_point_distance must be non-negative",
            ),
            (p.init.window > 0.0, "init_window must be positive"),
            (s.duration > 0.0, "duration must be positive"),
            (
                s.hold >= 0.0 && s.ramp >= 0.0,
                "hold and ramp must be non-negative",
            ),
            (
                s.imu_rate > 0.0 && s.sweep_rate > 0.0,
                "rates must be positive",
            ),
            (s.range_sigma >= 0.0, "range_sigma must be non-negative"),
            (
                s.rings >= 1 && s.azimuth_steps >= 2,
                "scan pattern needs rings and azimuth steps",
            ),
            (
                s.min_elevation <= s.max_elevation,
                "min_elevation above max_elevation",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(ConfigError::Invalid((*msg).into())),
            None => Ok(()),
        }
    }

    /// Simulator configuration for the current scenario keys.
    pub fn simulation_config(&self) -> SimulationConfig {
        let s = &self.simulation;
        let motion = match s.motion {
            MotionKind::Stationary => Motion::Stationary,
            MotionKind::Circular => Motion::Circular {
                radius: s.radius,
                speed: s.speed,
            },
            MotionKind::FigureEight => Motion::FigureEight {
                size: s.size,
                rate: s.turn_rate,
            },
            MotionKind::ConstantTwist => Motion::ConstantTwist {
                velocity: s.twist_velocity,
                omega: s.twist_omega,
            },
        };
        let mut trajectory = TrajectorySpec::new(motion, s.duration);
        trajectory.hold = s.hold;
        trajectory.ramp = s.ramp;
        let mut sim = SimulationConfig {
            trajectory,
            imu_rate: s.imu_rate,
            sweep_rate: s.sweep_rate,
            imu_noise: self.pipeline.noise,
            range_sigma: s.range_sigma,
            extrinsic: self.pipeline.extrinsic,
            seed: self.seed,
            ..SimulationConfig::default()
        };
        sim.trajectory.seed = self.seed;
        sim.pattern.rings = s.rings;
        sim.pattern.min_elevation = s.min_elevation;
        sim.pattern.max_elevation = s.max_elevation;
        sim.pattern.azimuth_steps = s.azimuth_steps;
        if s.noisy {
            sim
        } else {
            sim.noiseless()
        }
    }
}
