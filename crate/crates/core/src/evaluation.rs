//! Trajectory accuracy and local-consistency metrics, plus trajectory I/O.

use std::fmt;
use std::io::{self, BufRead, Write};

use nalgebra::{Quaternion, SVD};
use thiserror::Error;

use crate::geometry::{interpolate_pose_unchecked, Mat3, NavState, Pose, Rotation, Vec3};

/// Maximum distance in time from the ground-truth range an estimate may be
/// and still be associated (seconds).
pub const MAX_EXTRAPOLATION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("timestamps not strictly increasing at index {0}")]
    NotIncreasing(usize),
    #[error("sample spacing is not uniform at index {0}")]
    NonUniform(usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub timestamp: f64,
    pub pose: Pose,
    pub velocity: Option<Vec3>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn new(points: Vec<TrajectoryPoint>) -> Result<Self, EvalError> {
        if let Some(i) = points
            .windows(2)
            .position(|w| w[1].timestamp <= w[0].timestamp)
        {
            return Err(EvalError::NotIncreasing(i + 1));
        }
        Ok(Self { points })
    }

    pub fn from_states<'a>(
        states: impl IntoIterator<Item = &'a NavState>,
    ) -> Result<Self, EvalError> {
        Self::new(
            states
                .into_iter()
                .map(|s| TrajectoryPoint {
                    timestamp: s.timestamp,
                    pose: s.pose(),
                    velocity: Some(s.velocity),
                })
                .collect(),
        )
    }

    pub fn points(&self) -> &[TrajectoryPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Pose at `t` by linear/slerp interpolation; times up to
    /// [`MAX_EXTRAPOLATION`] outside the range snap to the nearest end.
    pub fn pose_at(&self, t: f64) -> Option<Pose> {
        let (first, last) = (self.points.first()?, self.points.last()?);
        if t < first.timestamp {
            return (first.timestamp - t <= MAX_EXTRAPOLATION).then_some(first.pose);
        }
        if t > last.timestamp {
            return (t - last.timestamp <= MAX_EXTRAPOLATION).then_some(last.pose);
        }
        let k = self.points.partition_point(|p| p.timestamp <= t);
        if k == self.points.len() {
            return Some(last.pose);
        }
        let (a, b) = (&self.points[k - 1], &self.points[k]);
        let alpha = (t - a.timestamp) / (b.timestamp - a.timestamp);
        Some(interpolate_pose_unchecked(&a.pose, &b.pose, alpha))
    }
}

/// Least-squares rigid transform (no scale) mapping `src` onto `dst`.
pub fn align_rigid(src: &[Vec3], dst: &[Vec3]) -> Pose {
    let n = src.len().min(dst.len()) as f64;
    let mu_s = src.iter().sum::<Vec3>() / n;
    let mu_d = dst.iter().sum::<Vec3>() / n;
    let h: Mat3 = src
        .iter()
        .zip(dst)
        .map(|(s, d)| (s - mu_s) * (d - mu_d).transpose())
        .sum();
    let svd = SVD::new(h, true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Mat3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v_t.transpose() * d * u.transpose();
    let rotation = Rotation::from_matrix(&r);
    Pose::new(rotation, mu_d - rotation.rotate(&mu_s))
}

/// Root-mean-square translational error of `est` against time-interpolated
/// `gt`, optionally after rigid alignment.
pub fn ate_rmse(est: &Trajectory, gt: &Trajectory, align: bool) -> Result<f64, EvalError> {
    let (src, dst): (Vec<Vec3>, Vec<Vec3>) = est
        .points
        .iter()
        .filter_map(|p| {
            gt.pose_at(p.timestamp)
                .map(|g| (p.pose.translation, g.translation))
        })
        .unzip();
    if src.len() < 2 {
        return Err(EvalError::TooFewSamples {
            needed: 2,
            got: src.len(),
        });
    }
    let transform = if align {
        align_rigid(&src, &dst)
    } else {
        Pose::identity()
    };
    let sq: f64 = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (transform.transform_point(s) - d).norm_squared())
        .sum();
    Ok((sq / src.len() as f64).sqrt())
}

/// Mean squared second difference of speed across consecutive states.
pub fn velocity_smoothness(states: &[NavState]) -> Result<f64, EvalError> {
    if states.len() < 3 {
        return Err(EvalError::TooFewSamples {
            needed: 3,
            got: states.len(),
        });
    }
    let dt0 = states[1].timestamp - states[0].timestamp;
    for (i, w) in states.windows(2).enumerate() {
        let dt = w[1].timestamp - w[0].timestamp;
        if dt <= 0.0 {
            return Err(EvalError::NotIncreasing(i + 1));
        }
        if (dt - dt0).abs() > 0.01 * dt0 {
            return Err(EvalError::NonUniform(i + 1));
        }
    }
    let speeds: Vec<f64> = states.iter().map(|s| s.velocity.norm()).collect();
    let sum: f64 = speeds
        .windows(3)
        .map(|w| (w[2] - 2.0 * w[1] + w[0]).powi(2))
        .sum();
    Ok(sum / (speeds.len() - 2) as f64)
}

/// Length-weighted mean turning angle (radians) between consecutive
/// translation increments, each expressed in the body frame at its start.
/// Constant-twist motion scores zero.
pub fn zigzag_score(traj: &Trajectory) -> Result<f64, EvalError> {
    let pts = &traj.points;
    if pts.len() < 3 {
        return Err(EvalError::TooFewSamples {
            needed: 3,
            got: pts.len(),
        });
    }
    let incs: Vec<Vec3> = pts
        .windows(2)
        .map(|w| {
            w[0].pose
                .rotation
                .inverse_rotate(&(w[1].pose.translation - w[0].pose.translation))
        })
        .collect();
    let (mut num, mut den) = (0.0, 0.0);
    for w in incs.windows(2) {
        let (a, b) = (w[0].norm(), w[1].norm());
        if a < 1e-12 || b < 1e-12 {
            continue;
        }
        let cos = (w[0].dot(&w[1]) / (a * b)).clamp(-1.0, 1.0);
        let weight = 0.5 * (a + b);
        num += weight * cos.acos();
        den += weight;
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Reads "timestamp tx ty tz qx qy qz qw [vx vy vz]" lines; blank lines and
/// lines starting with '#' are skipped.
pub fn read_trajectory<R: BufRead>(reader: R) -> Result<Trajectory, EvalError> {
    let mut points = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| EvalError::Parse {
            line: i + 1,
            message,
        };
        let vals = line
            .split_whitespace()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| parse_err(format!("'{f}': {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if vals.len() != 8 && vals.len() != 11 {
            return Err(parse_err(format!(
                "expected 8 or 11 fields, got {}",
                vals.len()
            )));
        }
        if !vals.iter().all(|v| v.is_finite()) {
            return Err(parse_err("non-finite value".into()));
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if q.norm() < 1e-9 {
            return Err(parse_err("zero quaternion".into()));
        }
        points.push(TrajectoryPoint {
            timestamp: vals[0],
            pose: Pose::new(
                Rotation::from_quaternion(q),
                Vec3::new(vals[1], vals[2], vals[3]),
            ),
            velocity: (vals.len() == 11).then(|| Vec3::new(vals[8], vals[9], vals[10])),
        });
    }
    Trajectory::new(points)
}

pub fn write_trajectory<W: Write>(traj: &Trajectory, mut out: W) -> io::Result<()> {
    for p in &traj.points {
        let (t, q) = (p.pose.translation, p.pose.rotation.quaternion());
        write!(
            out,
            "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            p.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )?;
        if let Some(v) = p.velocity {
            write!(out, " {:.9} {:.9} {:.9}", v.x, v.y, v.z)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// "t,speed" per state, for plotting.
pub fn write_speed_csv<W: Write>(states: &[NavState], mut out: W) -> io::Result<()> {
    writeln!(out, "t,speed")?;
    for s in states {
        writeln!(out, "{:.9},{:.9}", s.timestamp, s.velocity.norm())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub samples: usize,
    pub ate_rmse: f64,
    pub aligned: bool,
    /// Needs velocities in the estimate.
    pub velocity_smoothness: Option<f64>,
    pub zigzag_score: f64,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples={}", self.samples)?;
        writeln!(f, "aligned={}", self.aligned)?;
        writeln!(f, "ate_rmse={:.6}", self.ate_rmse)?;
        match self.velocity_smoothness {
            Some(v) => writeln!(f, "velocity_smoothness={v:.6e}")?,
            None => writeln!(f, "velocity_smoothness=nan")?,
        }
        write!(f, "zigzag_score={:.6}", self.zigzag_score)
    }
}

/// All metrics of `est` against `gt`. Velocity smoothness is computed from
/// the estimate's velocity column when present.
pub fn evaluate(
    est: &Trajectory,
    gt: &Trajectory,
    align: bool,
) -> Result<MetricsReport, EvalError> {
    let ate = ate_rmse(est, gt, align)?;
    let states: Option<Vec<NavState>> = est
        .points
        .iter()
        .map(|p| {
            p.velocity.map(|v| NavState {
                velocity: v,
                ..NavState::at(p.timestamp).with_pose(&p.pose)
            })
        })
        .collect();
    let smooth = match states {
        Some(s) if s.len() >= 3 => Some(velocity_smoothness(&s)?),
        _ => None,
    };
    Ok(MetricsReport {
        samples: est.len(),
        ate_rmse: ate,
        aligned: align,
        velocity_smoothness: smooth,
        zigzag_score: zigzag_score(est)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use proptest::prelude::*;

    fn line_traj(points: &[(f64, Vec3)]) -> Trajectory {
        Trajectory::new(
            points
                .iter()
                .map(|&(t, p)| TrajectoryPoint {
                    timestamp: t,
                    pose: Pose::from_translation(p),
                    velocity: None,
                })
                .collect(),
        )
        .unwrap()
    }

    fn spiral(n: usize) -> Trajectory {
        Trajectory::new(
            (0..n)
                .map(|k| {
                    let t = k as f64 * 0.1;
                    TrajectoryPoint {
                        timestamp: t,
                        pose: Pose::new(
                            so3_exp(&Vec3::new(0.1 * t, 0.0, 0.5 * t)),
                            Vec3::new(t.cos() * 3.0, t.sin() * 2.0, 0.1 * t * t),
                        ),
                        velocity: None,
                    }
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_trajectories_have_zero_ate() {
        let gt = spiral(50);
        assert_eq!(ate_rmse(&gt, &gt, false).unwrap(), 0.0);
        assert!(ate_rmse(&gt, &gt, true).unwrap() < 1e-12);
    }

    #[test]
    fn two_pose_toy_case() {
        let gt = line_traj(&[(0.0, Vec3::zeros()), (1.0, Vec3::x())]);
        let est = line_traj(&[(0.0, Vec3::zeros()), (1.0, Vec3::x() + Vec3::y())]);
        let ate = ate_rmse(&est, &gt, false).unwrap();
        assert!((ate - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn association_interpolates_and_limits_extrapolation() {
        let gt = line_traj(&[(0.0, Vec3::zeros()), (1.0, Vec3::new(2.0, 0.0, 0.0))]);
        let p = gt.pose_at(0.25).unwrap();
        assert!((p.translation - Vec3::new(0.5, 0.0, 0.0)).norm() < 1e-15);
        assert!(gt.pose_at(1.005).is_some());
        assert!(gt.pose_at(1.02).is_none());
        let disjoint = line_traj(&[(5.0, Vec3::zeros()), (6.0, Vec3::x())]);
        assert!(matches!(
            ate_rmse(&disjoint, &gt, true),
            Err(EvalError::TooFewSamples { .. })
        ));
    }

    proptest! {
        #[test]
        fn aligned_ate_invariant_to_rigid_transform(
            rot in prop::array::uniform3(-3.0f64..3.0),
            tr in prop::array::uniform3(-50.0f64..50.0),
        ) {
            let gt = spiral(40);
            let t = Pose::new(so3_exp(&Vec3::from(rot)), Vec3::from(tr));
            // perturbed estimate so the residual is non-trivial
            let est = Trajectory::new(
                gt.points()
                    .iter()
                    .enumerate()
                    .map(|(k, p)| TrajectoryPoint {
                        pose: Pose::new(
                            p.pose.rotation,
                            p.pose.translation + Vec3::new((k as f64).sin(), 0.3 * (k as f64 * 0.7).cos(), 0.0) * 0.1,
                        ),
                        ..*p
                    })
                    .collect(),
            )
            .unwrap();
            let moved = Trajectory::new(
                est.points().iter().map(|p| TrajectoryPoint { pose: t.compose(&p.pose), ..*p }).collect(),
            )
            .unwrap();
            let a = ate_rmse(&est, &gt, true).unwrap();
            let b = ate_rmse(&moved, &gt, true).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            let shifted_gt = Trajectory::new(
                gt.points().iter().map(|p| TrajectoryPoint { pose: t.compose(&p.pose), ..*p }).collect(),
            )
            .unwrap();
            prop_assert!(ate_rmse(&shifted_gt, &gt, true).unwrap() < 1e-9);
        }
    }

    fn speeds(v: &[f64]) -> Vec<NavState> {
        v.iter()
            .enumerate()
            .map(|(k, &s)| NavState {
                velocity: Vec3::new(s, 0.0, 0.0),
                ..NavState::at(k as f64 * 0.1)
            })
            .collect()
    }

    #[test]
    fn velocity_smoothness_examples() {
        assert_eq!(velocity_smoothness(&speeds(&[2.0; 10])).unwrap(), 0.0);
        assert_eq!(velocity_smoothness(&speeds(&[1.0, 2.0, 1.0])).unwrap(), 4.0);
        let ramp: Vec<f64> = (0..11).map(|k| 1.0 + 0.1 * k as f64).collect();
        let osc: Vec<f64> = ramp
            .iter()
            .enumerate()
            .map(|(k, &v)| match k {
                0 | 10 => v,
                _ if k % 2 == 0 => v + 0.5,
                _ => v - 0.5,
            })
            .collect();
        let (o, r) = (
            velocity_smoothness(&speeds(&osc)).unwrap(),
            velocity_smoothness(&speeds(&ramp)).unwrap(),
        );
        assert!(o > r);
        assert!(velocity_smoothness(&speeds(&[1.0, 2.0])).is_err());
        let mut uneven = speeds(&[1.0, 1.0, 1.0, 1.0]);
        uneven[3].timestamp = 0.5;
        assert!(matches!(
            velocity_smoothness(&uneven),
            Err(EvalError::NonUniform(3))
        ));
    }

    #[test]
    fn zigzag_examples() {
        let straight: Vec<_> = (0..10)
            .map(|k| (k as f64, Vec3::new(k as f64, 0.0, 0.0)))
            .collect();
        assert_eq!(zigzag_score(&line_traj(&straight)).unwrap(), 0.0);
        // staircase: +x, +y, +x, +y ... turns by ±90° every step
        let mut p = Vec3::zeros();
        let mut stairs = vec![(0.0, p)];
        for k in 1..12 {
            p += if k % 2 == 1 { Vec3::x() } else { Vec3::y() };
            stairs.push((k as f64, p));
        }
        let z = zigzag_score(&line_traj(&stairs)).unwrap();
        assert!((z - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!(zigzag_score(&line_traj(&stairs[..2])).is_err());
    }

    #[test]
    fn smoothing_lowers_zigzag() {
        let raw: Vec<(f64, Vec3)> = (0..30)
            .map(|k| {
                let x = k as f64 * 0.2;
                (
                    k as f64 * 0.1,
                    Vec3::new(x, if k % 2 == 0 { 0.05 } else { -0.05 }, 0.0),
                )
            })
            .collect();
        let smooth: Vec<(f64, Vec3)> = raw
            .iter()
            .enumerate()
            .map(|(k, &(t, p))| {
                let lo = k.saturating_sub(1);
                let hi = (k + 1).min(raw.len() - 1);
                let mean = (lo..=hi).map(|j| raw[j].1).sum::<Vec3>() / (hi - lo + 1) as f64;
                (t, Vec3::new(p.x, mean.y, mean.z))
            })
            .collect();
        let (zr, zs) = (
            zigzag_score(&line_traj(&raw)).unwrap(),
            zigzag_score(&line_traj(&smooth)).unwrap(),
        );
        assert!(zs < zr, "{zs} vs {zr}");
    }

    #[test]
    fn metrics_vanish_on_constant_twist() {
        let omega = Vec3::new(0.0, 0.0, 0.4);
        let v_body = Vec3::new(1.5, 0.0, 0.0);
        let mut x = NavState::at(0.0);
        let mut states = vec![];
        for k in 0..40 {
            let t = k as f64 * 0.1;
            x.timestamp = t;
            x.rotation = so3_exp(&(omega * t));
            x.translation = Vec3::new((0.4 * t).sin(), 1.0 - (0.4 * t).cos(), 0.0) * (1.5 / 0.4);
            x.velocity = x.rotation.rotate(&v_body);
            states.push(x);
        }
        assert!(velocity_smoothness(&states).unwrap() < 1e-20);
        assert!(zigzag_score(&Trajectory::from_states(&states).unwrap()).unwrap() < 1e-7);
    }

    #[test]
    fn trajectory_file_round_trip() {
        let mut states = vec![];
        for k in 0..5 {
            let mut s = NavState::at(k as f64 * 0.1);
            s.translation = Vec3::new(k as f64, 2.0, -1.0);
            s.rotation = so3_exp(&Vec3::new(0.1, 0.2, k as f64 * 0.3));
            s.velocity = Vec3::new(0.5, 0.0, 0.0);
            states.push(s);
        }
        let traj = Trajectory::from_states(&states).unwrap();
        let mut buf = Vec::new();
        write_trajectory(&traj, &mut buf).unwrap();
        let back = read_trajectory(&buf[..]).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in traj.points().iter().zip(back.points()) {
            assert!((a.pose.translation - b.pose.translation).norm() < 1e-8);
            assert!(a.pose.rotation.angle_to(&b.pose.rotation) < 1e-8);
            assert!((a.velocity.unwrap() - b.velocity.unwrap()).norm() < 1e-8);
        }
        assert!(matches!(
            read_trajectory(&b"0 1 2 3\n"[..]),
            Err(EvalError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            read_trajectory(&b"1 0 0 0 0 0 0 1\n0 0 0 0 0 0 0 1\n"[..]),
            Err(EvalError::NotIncreasing(1))
        ));
        let report = evaluate(&traj, &traj, true).unwrap();
        assert!(report.to_string().contains("ate_rmse=0.000000"));
    }
}
