//! Synthetic planar world, analytic trajectories, IMU streams and spinning
//! LiDAR sweeps. All randomness is drawn from seeded ChaCha generators.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{skew, so3_exp, Mat3, NavState, Pose, Rotation, Vec3};
use crate::imu::{ImuNoiseModel, ImuSample};
use crate::preprocessing::{Sweep, TimedPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("time {t:.6} outside trajectory [0, {duration:.6}]")]
    OutOfRange { t: f64, duration: f64 },
    #[error("IMU rate {0} Hz below 50 Hz")]
    RateTooLow(f64),
    #[error("sweep end {t_end:.6} not after begin {t_begin:.6}")]
    EmptySpan { t_begin: f64, t_end: f64 },
}

/// Rectangle `{c + a u + b v : |a| ≤ half_u, |b| ≤ half_v}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundedPlane {
    pub normal: Vec3,
    /// `d` in `n·x + d = 0`.
    pub offset: f64,
    pub center: Vec3,
    pub axis_u: Vec3,
    pub axis_v: Vec3,
    pub half_u: f64,
    pub half_v: f64,
}

impl BoundedPlane {
    /// `u` and `v` are orthogonalized; panics on non-positive extents.
    pub fn new(center: Vec3, u: Vec3, v: Vec3, half_u: f64, half_v: f64) -> Self {
        assert!(
            half_u > 0.0 && half_v > 0.0,
            "plane extents must be positive"
        );
        let axis_u = u.normalize();
        let axis_v = (v - axis_u * axis_u.dot(&v)).normalize();
        let normal = axis_u.cross(&axis_v);
        Self {
            normal,
            offset: -normal.dot(&center),
            center,
            axis_u,
            axis_v,
            half_u,
            half_v,
        }
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) + self.offset
    }

    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        let d = p - self.center;
        d.dot(&self.axis_u).abs() <= self.half_u + tol
            && d.dot(&self.axis_v).abs() <= self.half_v + tol
            && self.signed_distance(p).abs() <= tol.max(1e-9)
    }

    /// Ray parameter of the hit, if any, with `s > min_range`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3, min_range: f64) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = -self.signed_distance(origin) / denom;
        if s <= min_range {
            return None;
        }
        let hit = origin + dir * s;
        let d = hit - self.center;
        (d.dot(&self.axis_u).abs() <= self.half_u && d.dot(&self.axis_v).abs() <= self.half_v)
            .then_some(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    pub planes: Vec<BoundedPlane>,
    pub gravity: Vec3,
}

impl WorldModel {
    /// 20 m box room (floor at z = -2, ceiling at z = 4) with one upright
    /// interior wall and one slanted wall across a corner.
    pub fn default_room() -> Self {
        let (x, y, z) = (Vec3::x(), Vec3::y(), Vec3::z());
        let mid = 1.0;
        let slant_u = Vec3::new(1.0, -1.0, 0.0).normalize();
        let slant_v = Rotation::from_axis_angle(&slant_u, 20f64.to_radians()).rotate(&z);
        let planes = vec![
            BoundedPlane::new(Vec3::new(0.0, 0.0, -2.0), x, y, 10.0, 10.0),
            BoundedPlane::new(Vec3::new(0.0, 0.0, 4.0), x, y, 10.0, 10.0),
            BoundedPlane::new(Vec3::new(10.0, 0.0, mid), y, z, 10.0, 3.0),
            BoundedPlane::new(Vec3::new(-10.0, 0.0, mid), y, z, 10.0, 3.0),
            BoundedPlane::new(Vec3::new(0.0, 10.0, mid), x, z, 10.0, 3.0),
            BoundedPlane::new(Vec3::new(0.0, -10.0, mid), x, z, 10.0, 3.0),
            BoundedPlane::new(Vec3::new(7.0, -3.5, mid), y, z, 2.5, 3.0),
            BoundedPlane::new(Vec3::new(-7.0, -7.0, 0.5), slant_u, slant_v, 2.8, 2.0),
        ];
        Self {
            planes,
            gravity: Vec3::new(0.0, 0.0, 9.81),
        }
    }

    /// Closest hit along the ray, as (range, plane index).
    pub fn raycast(
        &self,
        origin: &Vec3,
        dir: &Vec3,
        min_range: f64,
        max_range: f64,
    ) -> Option<(f64, usize)> {
        self.planes
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.intersect(origin, dir, min_range).map(|s| (s, i)))
            .filter(|(s, _)| *s <= max_range)
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Distance from `p` to the nearest plane surface (unbounded planes
    /// restricted to those whose rectangle contains the projection).
    pub fn distance_to_surface(&self, p: &Vec3) -> f64 {
        self.planes
            .iter()
            .filter(|pl| {
                let proj = p - pl.normal * pl.signed_distance(p);
                pl.contains(&proj, 1e-6)
            })
            .map(|pl| pl.signed_distance(p).abs())
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    Stationary,
    /// Constant body-frame velocity and angular rate (after the ramp).
    ConstantTwist {
        velocity: Vec3,
        omega: Vec3,
    },
    /// Horizontal circle through the origin, centred at (0, radius, 0),
    /// travelled counter-clockwise.
    Circular {
        radius: f64,
        speed: f64,
    },
    /// Horizontal lemniscate `(a sin φ, a/2 sin 2φ)` with `φ̇ = rate`.
    FigureEight {
        size: f64,
        rate: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySpec {
    pub motion: Motion,
    pub duration: f64,
    /// Stationary lead-in before motion starts, seconds.
    pub hold: f64,
    /// Duration of the smooth speed ramp following the hold.
    pub ramp: f64,
    pub seed: u64,
}

impl TrajectorySpec {
    pub fn new(motion: Motion, duration: f64) -> Self {
        Self {
            motion,
            duration,
            hold: 2.0,
            ramp: 2.0,
            seed: 0,
        }
    }

    pub fn stationary(duration: f64) -> Self {
        Self::new(Motion::Stationary, duration)
    }

    pub fn circular(radius: f64, speed: f64, duration: f64) -> Self {
        Self::new(Motion::Circular { radius, speed }, duration)
    }
}

/// Progress along the path and its first two derivatives for unit nominal
/// rate: zero during the hold, quintic smooth-step ramp, then linear.
fn progress(spec: &TrajectorySpec, t: f64) -> (f64, f64, f64) {
    let tau = t - spec.hold;
    if tau <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let ramp = spec.ramp;
    if ramp <= 0.0 {
        return (tau, 1.0, 0.0);
    }
    if tau < ramp {
        let x = tau / ramp;
        let s = ramp * (x.powi(6) - 3.0 * x.powi(5) + 2.5 * x.powi(4));
        let ds = 6.0 * x.powi(5) - 15.0 * x.powi(4) + 10.0 * x.powi(3);
        let dds = (30.0 * x.powi(4) - 60.0 * x.powi(3) + 30.0 * x.powi(2)) / ramp;
        (s, ds, dds)
    } else {
        (0.5 * ramp + tau - ramp, 1.0, 0.0)
    }
}

/// Exact kinematics at time t: state, world-frame acceleration and
/// body-frame angular rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub state: NavState,
    pub acc_world: Vec3,
    pub omega_body: Vec3,
}

fn planar(t: f64, phase: (f64, f64, f64), curve: impl Fn(f64) -> (Vec3, Vec3, Vec3)) -> Kinematics {
    let (phi, dphi, ddphi) = phase;
    let (p, d1, d2) = curve(phi);
    let yaw = d1.y.atan2(d1.x);
    let yaw_rate = (d1.x * d2.y - d1.y * d2.x) / d1.xy().norm_squared() * dphi;
    let mut state = NavState::at(t);
    state.translation = p;
    state.rotation = Rotation::from_axis_angle(&Vec3::z(), yaw);
    state.velocity = d1 * dphi;
    Kinematics {
        state,
        acc_world: d2 * dphi * dphi + d1 * ddphi,
        omega_body: Vec3::new(0.0, 0.0, yaw_rate),
    }
}

/// Integral of `Exp(ω u)` over `u ∈ [0, s]`.
fn exp_integral(omega: &Vec3, s: f64) -> Mat3 {
    let w = omega.norm();
    let k = skew(omega);
    if w * s < 1e-6 {
        return Mat3::identity() * s + k * (s * s / 2.0) + k * k * (s * s * s / 6.0);
    }
    Mat3::identity() * s
        + k * ((1.0 - (w * s).cos()) / (w * w))
        + k * k * ((s - (w * s).sin() / w) / (w * w))
}

pub fn kinematics(spec: &TrajectorySpec, t: f64) -> Result<Kinematics, SimError> {
    if !(0.0..=spec.duration).contains(&t) {
        return Err(SimError::OutOfRange {
            t,
            duration: spec.duration,
        });
    }
    let (s, ds, dds) = progress(spec, t);
    Ok(match spec.motion {
        Motion::Stationary => Kinematics {
            state: NavState::at(t),
            acc_world: Vec3::zeros(),
            omega_body: Vec3::zeros(),
        },
        Motion::ConstantTwist { velocity, omega } => {
            let r = so3_exp(&(omega * s));
            let mut state = NavState::at(t);
            state.rotation = r;
            state.translation = exp_integral(&omega, s) * velocity;
            state.velocity = r.rotate(&velocity) * ds;
            Kinematics {
                state,
                acc_world: r.rotate(&(omega.cross(&velocity) * ds * ds + velocity * dds)),
                omega_body: omega * ds,
            }
        }
        Motion::Circular { radius, speed } => {
            let k = speed / radius;
            planar(t, (s * k, ds * k, dds * k), |phi| {
                let (sn, cs) = phi.sin_cos();
                (
                    Vec3::new(radius * sn, radius - radius * cs, 0.0),
                    Vec3::new(radius * cs, radius * sn, 0.0),
                    Vec3::new(-radius * sn, radius * cs, 0.0),
                )
            })
        }
        Motion::FigureEight { size, rate } => planar(t, (s * rate, ds * rate, dds * rate), |phi| {
            let (s1, c1) = phi.sin_cos();
            let (s2, c2) = (2.0 * phi).sin_cos();
            (
                Vec3::new(size * s1, 0.5 * size * s2, 0.0),
                Vec3::new(size * c1, size * c2, 0.0),
                Vec3::new(-size * s1, -2.0 * size * s2, 0.0),
            )
        }),
    })
}

/// Ground-truth navigation state (zero biases) at time t.
pub fn exact_state(spec: &TrajectorySpec, t: f64) -> Result<NavState, SimError> {
    kinematics(spec, t).map(|k| k.state)
}

/// True sensor biases: initial values plus an optional random walk driven by
/// the noise model's bias densities.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BiasSpec {
    pub initial_acc: Vec3,
    pub initial_gyro: Vec3,
    pub random_walk: bool,
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma.max(0.0)).expect("finite sigma")
}

fn gaussian3(rng: &mut ChaCha8Rng, d: &Normal<f64>) -> Vec3 {
    Vec3::new(d.sample(rng), d.sample(rng), d.sample(rng))
}

/// IMU stream at `rate` Hz over `[0, duration]`. Noise standard deviations
/// are per sample; bias random walk uses `σ_b √dt` per step.
pub fn gen_imu(
    spec: &TrajectorySpec,
    rate: f64,
    noise: &ImuNoiseModel,
    bias: &BiasSpec,
    seed: u64,
) -> Result<Vec<ImuSample>, SimError> {
    if rate < 50.0 {
        return Err(SimError::RateTooLow(rate));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1.0 / rate;
    let n = (spec.duration * rate + 1e-9).floor() as usize;
    let gravity = Vec3::new(0.0, 0.0, noise.gravity_norm);
    let (na, ng) = (normal(noise.sigma_acc), normal(noise.sigma_gyro));
    let (nba, nbg) = (
        normal(noise.sigma_acc_bias * dt.sqrt()),
        normal(noise.sigma_gyro_bias * dt.sqrt()),
    );
    let (mut ba, mut bg) = (bias.initial_acc, bias.initial_gyro);
    let mut out = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = k as f64 * dt;
        let kin = kinematics(spec, t)?;
        let acc = kin
            .state
            .rotation
            .inverse_rotate(&(kin.acc_world + gravity))
            + ba
            + gaussian3(&mut rng, &na);
        let gyro = kin.omega_body + bg + gaussian3(&mut rng, &ng);
        out.push(ImuSample::new(t, acc, gyro));
        if bias.random_walk {
            ba += gaussian3(&mut rng, &nba);
            bg += gaussian3(&mut rng, &nbg);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPattern {
    pub rings: usize,
    /// Elevation range in degrees.
    pub min_elevation: f64,
    pub max_elevation: f64,
    pub azimuth_steps: usize,
    pub min_range: f64,
    pub max_range: f64,
}

impl Default for ScanPattern {
    fn default() -> Self {
        Self {
            rings: 64,
            min_elevation: -30.0,
            max_elevation: 30.0,
            azimuth_steps: 1800,
            min_range: 0.5,
            max_range: 100.0,
        }
    }
}

/// One spinning-LiDAR revolution over `[t_begin, t_end]`. Column `k` is
/// fired at `t_begin + k/(steps-1) · (t_end - t_begin)`; points are returned
/// in the sensor frame with Gaussian range noise.
pub fn gen_sweep(
    world: &WorldModel,
    spec: &TrajectorySpec,
    extrinsic: &Pose,
    t_begin: f64,
    t_end: f64,
    pattern: &ScanPattern,
    range_sigma: f64,
    seed: u64,
) -> Result<Sweep, SimError> {
    if t_end <= t_begin {
        return Err(SimError::EmptySpan { t_begin, t_end });
    }
    let steps = pattern.azimuth_steps.max(2);
    let rings = pattern.rings.max(1);
    let columns: Vec<Vec<(f64, Vec3, f64)>> = (0..steps)
        .into_par_iter()
        .map(|k| -> Result<_, SimError> {
            let t = t_begin + (t_end - t_begin) * k as f64 / (steps - 1) as f64;
            let lidar = exact_state(spec, t)?.pose().compose(extrinsic);
            let az = std::f64::consts::TAU * k as f64 / steps as f64;
            let mut col = Vec::new();
            for ring in 0..rings {
                let el = if rings == 1 {
                    pattern.min_elevation
                } else {
                    pattern.min_elevation
                        + (pattern.max_elevation - pattern.min_elevation) * ring as f64
                            / (rings - 1) as f64
                }
                .to_radians();
                let dir_s = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
                let dir_w = lidar.rotation.rotate(&dir_s);
                if let Some((range, _)) = world.raycast(
                    &lidar.translation,
                    &dir_w,
                    pattern.min_range,
                    pattern.max_range,
                ) {
                    col.push((t, dir_s, range));
                }
            }
            Ok(col)
        })
        .collect::<Result<_, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = normal(range_sigma);
    let points = columns
        .into_iter()
        .flatten()
        .map(|(t, dir, range)| {
            let noisy = if range_sigma > 0.0 {
                range + dist.sample(&mut rng)
            } else {
                range
            };
            TimedPoint::new(dir * noisy, t)
        })
        .collect();
    Ok(Sweep {
        index: 0,
        t_begin,
        t_end,
        points,
    })
}

/// Everything needed to synthesize a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub world: WorldModel,
    pub trajectory: TrajectorySpec,
    pub imu_rate: f64,
    pub sweep_rate: f64,
    /// Noise injected into the IMU stream.
    pub imu_noise: ImuNoiseModel,
    pub bias: BiasSpec,
    pub range_sigma: f64,
    pub pattern: ScanPattern,
    pub extrinsic: Pose,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            world: WorldModel::default_room(),
            trajectory: TrajectorySpec::circular(4.0, 2.0, 30.0),
            imu_rate: 200.0,
            sweep_rate: 10.0,
            imu_noise: ImuNoiseModel::default(),
            bias: BiasSpec {
                random_walk: true,
                ..BiasSpec::default()
            },
            range_sigma: 0.02,
            pattern: ScanPattern::default(),
            extrinsic: Pose::identity(),
            seed: 0,
        }
    }
}

impl SimulationConfig {
    /// Same scenario with perfect IMU and ranges.
    pub fn noiseless(mut self) -> Self {
        self.imu_noise = ImuNoiseModel {
            gravity_norm: self.imu_noise.gravity_norm,
            ..ImuNoiseModel::noiseless()
        };
        self.bias = BiasSpec::default();
        self.range_sigma = 0.0;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedRun {
    pub imu: Vec<ImuSample>,
    pub sweeps: Vec<Sweep>,
    /// True states at every sweep boundary, starting at t = 0.
    pub ground_truth: Vec<NavState>,
}

/// Generates IMU, sweeps and ground truth over the whole trajectory. Sweep
/// `k` spans `[k/rate, (k+1)/rate]`; all randomness derives from `seed`.
pub fn simulate(cfg: &SimulationConfig) -> Result<SimulatedRun, SimError> {
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let imu_seed = rand::Rng::random::<u64>(&mut master);
    let spec = TrajectorySpec {
        seed: cfg.seed,
        ..cfg.trajectory
    };
    let imu = gen_imu(&spec, cfg.imu_rate, &cfg.imu_noise, &cfg.bias, imu_seed)?;
    let count = (spec.duration * cfg.sweep_rate + 1e-9).floor() as usize;
    let seeds: Vec<u64> = (0..count).map(|_| rand::Rng::random(&mut master)).collect();
    let boundary = |k: usize| k as f64 / cfg.sweep_rate;
    let sweeps = seeds
        .par_iter()
        .enumerate()
        .map(|(k, &seed)| {
            let mut s = gen_sweep(
                &cfg.world,
                &spec,
                &cfg.extrinsic,
                boundary(k),
                boundary(k + 1).min(spec.duration),
                &cfg.pattern,
                cfg.range_sigma,
                seed,
            )?;
            s.index = k;
            Ok(s)
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let ground_truth = (0..=count)
        .map(|k| exact_state(&spec, boundary(k).min(spec.duration)))
        .collect::<Result<_, _>>()?;
    Ok(SimulatedRun {
        imu,
        sweeps,
        ground_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imu::{integrate, propagate_window};
    use crate::preprocessing::{undistort_imu, undistort_uniform};

    fn gt_pose_fn(spec: TrajectorySpec) -> impl Fn(f64) -> NavState {
        move |t| exact_state(&spec, t).unwrap()
    }

    #[test]
    fn stationary_is_initial_state() {
        let spec = TrajectorySpec::stationary(5.0);
        for t in [0.0, 1.3, 5.0] {
            let s = exact_state(&spec, t).unwrap();
            assert_eq!(s.translation, Vec3::zeros());
            assert_eq!(s.velocity, Vec3::zeros());
        }
        assert!(exact_state(&spec, 5.1).is_err());
    }

    #[test]
    fn circular_speed_and_velocity_finite_difference() {
        let spec = TrajectorySpec::circular(10.0, 2.0, 20.0);
        let s = exact_state(&spec, 10.0).unwrap();
        assert!((s.velocity.norm() - 2.0).abs() < 1e-12);
        let f = gt_pose_fn(spec);
        let h = 1e-5;
        for t in [1.0, 2.5, 3.3, 7.0, 15.0] {
            let fd = (f(t + h).translation - f(t - h).translation) / (2.0 * h);
            assert!((fd - f(t).velocity).norm() < 1e-6, "t={t}");
        }
    }

    #[test]
    fn kinematics_derivatives_match_finite_differences() {
        let specs = [
            TrajectorySpec::circular(4.0, 2.0, 20.0),
            TrajectorySpec::new(
                Motion::FigureEight {
                    size: 4.0,
                    rate: 0.4,
                },
                20.0,
            ),
            TrajectorySpec::new(
                Motion::ConstantTwist {
                    velocity: Vec3::new(1.0, 0.2, 0.1),
                    omega: Vec3::new(0.1, -0.2, 0.3),
                },
                20.0,
            ),
        ];
        let h = 1e-4;
        for spec in specs {
            for t in [2.7, 3.5, 9.0] {
                let k = kinematics(&spec, t).unwrap();
                let (m, p) = (
                    exact_state(&spec, t - h).unwrap(),
                    exact_state(&spec, t + h).unwrap(),
                );
                let acc = (p.velocity - m.velocity) / (2.0 * h);
                assert!((acc - k.acc_world).norm() < 1e-6, "{spec:?} t={t}");
                let pos = (p.translation - m.translation) / (2.0 * h);
                assert!((pos - k.state.velocity).norm() < 1e-6);
                let omega = crate::geometry::so3_log(&m.rotation.inverse().compose(&p.rotation))
                    / (2.0 * h);
                assert!((omega - k.omega_body).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn stationary_noiseless_imu() {
        let spec = TrajectorySpec::stationary(1.0);
        let noise = ImuNoiseModel::default();
        let imu = gen_imu(
            &spec,
            200.0,
            &ImuNoiseModel::noiseless(),
            &BiasSpec::default(),
            1,
        )
        .unwrap();
        assert_eq!(imu.len(), 201);
        for s in &imu {
            assert_eq!(s.gyro, Vec3::zeros());
            assert_eq!(s.acc, Vec3::new(0.0, 0.0, noise.gravity_norm));
        }
        assert!(gen_imu(&spec, 20.0, &noise, &BiasSpec::default(), 1).is_err());
    }

    #[test]
    fn circular_centripetal_specific_force() {
        let (r, v) = (5.0, 2.0);
        let spec = TrajectorySpec::circular(r, v, 10.0);
        let imu = gen_imu(
            &spec,
            200.0,
            &ImuNoiseModel::noiseless(),
            &BiasSpec::default(),
            0,
        )
        .unwrap();
        let s = imu.last().unwrap();
        assert!((s.acc.xy().norm() - v * v / r).abs() < 1e-9);
        assert!((s.acc.z - 9.81).abs() < 1e-12);
        assert!((s.gyro.z - v / r).abs() < 1e-12);
    }

    #[test]
    fn seeded_streams_are_reproducible() {
        let spec = TrajectorySpec::circular(4.0, 2.0, 3.0);
        let bias = BiasSpec {
            initial_acc: Vec3::new(0.01, 0.0, 0.0),
            initial_gyro: Vec3::zeros(),
            random_walk: true,
        };
        let a = gen_imu(&spec, 200.0, &ImuNoiseModel::default(), &bias, 7).unwrap();
        let b = gen_imu(&spec, 200.0, &ImuNoiseModel::default(), &bias, 7).unwrap();
        let c = gen_imu(&spec, 200.0, &ImuNoiseModel::default(), &bias, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let world = WorldModel::default_room();
        let ext = Pose::identity();
        let p = ScanPattern::default();
        let s1 = gen_sweep(&world, &spec, &ext, 2.5, 2.6, &p, 0.02, 3).unwrap();
        let s2 = gen_sweep(&world, &spec, &ext, 2.5, 2.6, &p, 0.02, 3).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn ray_cast_from_room_center() {
        let world = WorldModel::default_room();
        // +y wall is 10 m away, floor is 2 m below
        let (s, i) = world
            .raycast(&Vec3::zeros(), &Vec3::y(), 0.1, 100.0)
            .unwrap();
        assert!((s - 10.0).abs() < 1e-12 && i == 4);
        let d = Vec3::new(1.0, 0.0, -1.0).normalize();
        let (s, _) = world.raycast(&Vec3::zeros(), &d, 0.1, 100.0).unwrap();
        assert!((s - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        // interior wall shadows the +x wall
        let (s, i) = world
            .raycast(&Vec3::new(0.0, -3.0, 0.0), &Vec3::x(), 0.1, 100.0)
            .unwrap();
        assert!((s - 7.0).abs() < 1e-12 && i == 6);
    }

    #[test]
    fn noisy_ranges_stay_near_analytic_hits() {
        let world = WorldModel::default_room();
        let spec = TrajectorySpec::stationary(1.0);
        let p = ScanPattern::default();
        let sweep = gen_sweep(&world, &spec, &Pose::identity(), 0.0, 0.1, &p, 0.02, 11).unwrap();
        let clean = gen_sweep(&world, &spec, &Pose::identity(), 0.0, 0.1, &p, 0.0, 11).unwrap();
        assert_eq!(sweep.points.len(), clean.points.len());
        let errs: Vec<f64> = sweep
            .points
            .iter()
            .zip(&clean.points)
            .map(|(a, b)| a.position.norm() - b.position.norm())
            .collect();
        let rms = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
        assert!((rms - 0.02).abs() < 0.002, "rms {rms}");
        assert!(errs.iter().all(|e| e.abs() < 0.02 * 6.0));
    }

    #[test]
    fn stationary_sweep_points_lie_on_planes() {
        let world = WorldModel::default_room();
        let spec = TrajectorySpec::stationary(1.0);
        let ext = Pose::new(
            Rotation::from_axis_angle(&Vec3::z(), 0.1),
            Vec3::new(0.1, 0.0, 0.05),
        );
        let sweep = gen_sweep(
            &world,
            &spec,
            &ext,
            0.0,
            0.1,
            &ScanPattern::default(),
            0.0,
            0,
        )
        .unwrap();
        assert!(sweep.points.len() > 20000);
        for p in &sweep.points {
            assert!(world.distance_to_surface(&ext.transform_point(&p.position)) < 1e-9);
        }
    }

    #[test]
    fn moving_sweep_undistorted_with_truth_lies_on_planes() {
        let world = WorldModel::default_room();
        let ext = Pose::new(Rotation::identity(), Vec3::new(0.1, 0.0, 0.05));
        let (tb, te) = (5.0, 5.1);
        let on_planes = |pts: &[TimedPoint], xe: &NavState| {
            pts.iter()
                .map(|p| world.distance_to_surface(&xe.pose().transform_point(&p.position)))
                .fold(0.0, f64::max)
        };

        // screw motion: linear interpolation between the true end poses is exact
        let screw = TrajectorySpec::new(
            Motion::ConstantTwist {
                velocity: Vec3::new(0.0, 0.0, 0.3),
                omega: Vec3::new(0.0, 0.0, 0.8),
            },
            10.0,
        );
        // a lever arm would trace a helix, so keep the sensor on the screw axis
        let tilt = Pose::new(Rotation::from_axis_angle(&Vec3::x(), 0.2), Vec3::zeros());
        let sweep = gen_sweep(
            &world,
            &screw,
            &tilt,
            tb,
            te,
            &ScanPattern::default(),
            0.0,
            0,
        )
        .unwrap();
        let xb = exact_state(&screw, tb).unwrap();
        let xe = exact_state(&screw, te).unwrap();
        let und = undistort_uniform(&sweep, &xb, &xe, &tilt).unwrap();
        assert!(on_planes(&und, &xe) < 1e-6);

        // curved path: uniform interpolation is approximate, IMU chaining is not
        let circle = TrajectorySpec::circular(4.0, 2.0, 10.0);
        let sweep = gen_sweep(
            &world,
            &circle,
            &ext,
            tb,
            te,
            &ScanPattern::default(),
            0.0,
            0,
        )
        .unwrap();
        let xb = exact_state(&circle, tb).unwrap();
        let xe = exact_state(&circle, te).unwrap();
        let und = undistort_uniform(&sweep, &xb, &xe, &ext).unwrap();
        // grazing hits near a wall edge may leave its rectangle by the same
        // few millimetres, so containment uses a matching margin here
        let near_planes = |pts: &[TimedPoint], xe: &NavState| {
            pts.iter()
                .map(|p| {
                    let w = xe.pose().transform_point(&p.position);
                    world
                        .planes
                        .iter()
                        .filter(|pl| pl.contains(&(w - pl.normal * pl.signed_distance(&w)), 5e-3))
                        .map(|pl| pl.signed_distance(&w).abs())
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        };
        assert!(near_planes(&und, &xe) < 5e-3);
        let imu = gen_imu(
            &circle,
            200.0,
            &ImuNoiseModel::noiseless(),
            &BiasSpec::default(),
            0,
        )
        .unwrap();
        let g = Vec3::new(0.0, 0.0, 9.81);
        let und = undistort_imu(&sweep, &imu, &xb, &ext, &g).unwrap();
        let end = propagate_window(&xb, &crate::imu::imu_window(&imu, tb, te).unwrap(), &g);
        assert!(on_planes(&und, end.last().unwrap()) < 1e-6);
    }

    /// Drift of chained 0.1 s pre-integrations against the analytic path.
    fn chained_drift(spec: &TrajectorySpec, rate: f64) -> f64 {
        let g = Vec3::new(0.0, 0.0, 9.81);
        let imu = gen_imu(
            spec,
            rate,
            &ImuNoiseModel::noiseless(),
            &BiasSpec::default(),
            0,
        )
        .unwrap();
        let per = (rate / 10.0).round() as usize;
        let mut x = exact_state(spec, 0.0).unwrap();
        let mut worst: f64 = 0.0;
        for w in imu.windows(per + 1).step_by(per) {
            let pre = integrate(
                w,
                &Vec3::zeros(),
                &Vec3::zeros(),
                &ImuNoiseModel::noiseless(),
            )
            .unwrap();
            let (r, dt) = (x.rotation, pre.dt);
            x = NavState {
                timestamp: x.timestamp + dt,
                translation: x.translation + x.velocity * dt - g * (0.5 * dt * dt)
                    + r.rotate(&pre.delta_p),
                rotation: r.compose(&pre.delta_q),
                velocity: x.velocity - g * dt + r.rotate(&pre.delta_v),
                ..x
            };
            let truth = exact_state(spec, x.timestamp).unwrap();
            worst = worst
                .max((x.translation - truth.translation).norm())
                .max(x.rotation.angle_to(&truth.rotation));
        }
        assert!((x.timestamp - spec.duration).abs() < 1e-9);
        worst
    }

    #[test]
    fn noiseless_imu_reproduces_trajectory() {
        let mut gentle = TrajectorySpec::circular(10.0, 0.5, 10.0);
        gentle.ramp = 4.0;
        assert!(chained_drift(&gentle, 200.0) < 1e-6);
        let still = TrajectorySpec::stationary(10.0);
        assert!(chained_drift(&still, 200.0) < 1e-12);
        // mid-point truncation is second order: doubling the rate quarters the drift
        for spec in [
            TrajectorySpec::circular(4.0, 2.0, 10.0),
            TrajectorySpec::new(
                Motion::FigureEight {
                    size: 4.0,
                    rate: 0.4,
                },
                10.0,
            ),
        ] {
            let (coarse, fine) = (chained_drift(&spec, 200.0), chained_drift(&spec, 400.0));
            assert!(coarse < 2e-5, "{coarse}");
            assert!(coarse / fine > 3.5, "{coarse} / {fine}");
        }
    }
}
