//! Sweep down-sampling and motion-distortion calibration.

use std::collections::HashSet;

use thiserror::Error;

use crate::geometry::{interpolate_pose_unchecked, NavState, Pose, Vec3};
use crate::imu::{imu_window, propagate, propagate_window, ImuError, ImuSample};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("non-finite state passed to undistortion")]
    NonFiniteState,
    #[error("point at {t:.6} lies outside sweep [{begin:.6}, {end:.6}]")]
    PointOutsideSweep { t: f64, begin: f64, end: f64 },
    #[error(transparent)]
    Imu(#[from] ImuError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPoint {
    pub position: Vec3,
    pub timestamp: f64,
}

impl TimedPoint {
    pub fn new(position: Vec3, timestamp: f64) -> Self {
        Self {
            position,
            timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub index: usize,
    pub t_begin: f64,
    pub t_end: f64,
    pub points: Vec<TimedPoint>,
}

impl Sweep {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_begin
    }

    /// Fraction of the sweep elapsed at `t`, clamped to [0, 1].
    pub fn alpha(&self, t: f64) -> f64 {
        ((t - self.t_begin) / self.duration()).clamp(0.0, 1.0)
    }

    pub fn with_points(&self, points: Vec<TimedPoint>) -> Sweep {
        Sweep {
            index: self.index,
            t_begin: self.t_begin,
            t_end: self.t_end,
            points,
        }
    }
}

/// Keeps input indices 0, `step`, 2·`step`, …
pub fn quantitative_downsample_every(points: &[TimedPoint], step: usize) -> Vec<TimedPoint> {
    points.iter().step_by(step.max(1)).copied().collect()
}

/// Keeps one of every four points.
pub fn quantitative_downsample(points: &[TimedPoint]) -> Vec<TimedPoint> {
    quantitative_downsample_every(points, 4)
}

pub(crate) fn cell_of(p: &Vec3, size: f64) -> (i64, i64, i64) {
    (
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    )
}

/// Keeps the first point falling into each `voxel_size` cell, preserving
/// input order.
pub fn voxel_downsample(points: &[TimedPoint], voxel_size: f64) -> Vec<TimedPoint> {
    let mut seen = HashSet::with_capacity(points.len());
    points
        .iter()
        .filter(|p| seen.insert(cell_of(&p.position, voxel_size)))
        .copied()
        .collect()
}

fn check_sweep_times(sweep: &Sweep) -> Result<(), PreprocessError> {
    const SLACK: f64 = 1e-9;
    for p in &sweep.points {
        if p.timestamp < sweep.t_begin - SLACK || p.timestamp > sweep.t_end + SLACK {
            return Err(PreprocessError::PointOutsideSweep {
                t: p.timestamp,
                begin: sweep.t_begin,
                end: sweep.t_end,
            });
        }
    }
    Ok(())
}

/// Re-expresses sensor-frame points in the IMU frame at `t_end`, assuming
/// uniform motion between the begin and end LiDAR poses.
pub fn undistort_uniform(
    sweep: &Sweep,
    x_b: &NavState,
    x_e: &NavState,
    extrinsic: &Pose,
) -> Result<Vec<TimedPoint>, PreprocessError> {
    if !x_b.is_finite() || !x_e.is_finite() {
        return Err(PreprocessError::NonFiniteState);
    }
    check_sweep_times(sweep)?;
    let lidar_b = x_b.pose().compose(extrinsic);
    let lidar_e = x_e.pose().compose(extrinsic);
    let world_to_end = x_e.pose().inverse();
    Ok(sweep
        .points
        .iter()
        .map(|p| {
            let alpha = sweep.alpha(p.timestamp);
            let position = if alpha == 1.0 {
                extrinsic.transform_point(&p.position)
            } else {
                let pose = interpolate_pose_unchecked(&lidar_b, &lidar_e, alpha);
                world_to_end.transform_point(&pose.transform_point(&p.position))
            };
            TimedPoint::new(position, p.timestamp)
        })
        .collect())
}

/// Re-expresses sensor-frame points in the IMU frame at `t_end`, using the
/// IMU-propagated pose at each point's timestamp.
pub fn undistort_imu(
    sweep: &Sweep,
    imu: &[ImuSample],
    x_b: &NavState,
    extrinsic: &Pose,
    gravity: &Vec3,
) -> Result<Vec<TimedPoint>, PreprocessError> {
    if !x_b.is_finite() {
        return Err(PreprocessError::NonFiniteState);
    }
    check_sweep_times(sweep)?;
    let window = imu_window(imu, sweep.t_begin, sweep.t_end)?;
    let states = propagate_window(x_b, &window, gravity);
    let end = states.last().expect("window has >= 2 samples");
    let world_to_end = end.pose().inverse();

    Ok(sweep
        .points
        .iter()
        .map(|p| {
            let t = p.timestamp.clamp(sweep.t_begin, sweep.t_end);
            // last sample at or before t
            let k = window
                .partition_point(|s| s.timestamp <= t)
                .saturating_sub(1)
                .min(window.len() - 2);
            let state = if t == window[k].timestamp {
                states[k]
            } else {
                let at = ImuSample::lerp(&window[k], &window[k + 1], t);
                propagate(&states[k], &window[k], &at, gravity)
            };
            let lidar = state.pose().compose(extrinsic);
            TimedPoint::new(
                world_to_end.transform_point(&lidar.transform_point(&p.position)),
                p.timestamp,
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{so3_exp, Rotation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(x: f64, y: f64, z: f64, t: f64) -> TimedPoint {
        TimedPoint::new(Vec3::new(x, y, z), t)
    }

    fn extrinsic() -> Pose {
        Pose::new(
            so3_exp(&Vec3::new(0.01, -0.02, 0.3)),
            Vec3::new(0.1, -0.05, 0.2),
        )
    }

    #[test]
    fn quantitative_keeps_every_fourth() {
        let pts: Vec<_> = (0..8).map(|i| pt(i as f64, 0.0, 0.0, 0.0)).collect();
        let out = quantitative_downsample(&pts);
        assert_eq!(out, vec![pts[0], pts[4]]);
        assert_eq!(quantitative_downsample(&pts[..1]), vec![pts[0]]);
        assert_eq!(quantitative_downsample(&pts[..5]).len(), 2);
    }

    #[test]
    fn quantitative_subset_of_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<_> = (0..1000)
            .map(|_| pt(rng.random(), rng.random(), rng.random(), 0.0))
            .collect();
        let out = quantitative_downsample(&pts);
        assert_eq!(out.len(), 250);
        assert!(out.iter().all(|p| pts.contains(p)));
    }

    #[test]
    fn voxel_same_and_distinct_cells() {
        let a = pt(0.1, 0.1, 0.1, 0.0);
        let b = pt(0.2, 0.2, 0.2, 1.0);
        let c = pt(0.9, 0.9, 0.9, 2.0);
        assert_eq!(voxel_downsample(&[a, b], 0.5), vec![a]);
        assert_eq!(voxel_downsample(&[a, c], 0.5), vec![a, c]);
        // negative coordinates floor rather than truncate
        let d = pt(-0.1, 0.1, 0.1, 0.0);
        assert_eq!(voxel_downsample(&[a, d], 0.5).len(), 2);
    }

    #[test]
    fn voxel_pigeonhole() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<_> = (0..50_000)
            .map(|_| {
                pt(
                    rng.random_range(0.0..10.0),
                    rng.random_range(0.0..10.0),
                    rng.random_range(0.0..10.0),
                    0.0,
                )
            })
            .collect();
        let out = voxel_downsample(&pts, 0.5);
        assert!(out.len() <= 8000);
        let cells: HashSet<_> = out.iter().map(|p| cell_of(&p.position, 0.5)).collect();
        assert_eq!(cells.len(), out.len());
        assert!(out.iter().all(|p| pts.contains(p)));
        assert_eq!(out, voxel_downsample(&pts, 0.5));
    }

    fn sweep(points: Vec<TimedPoint>) -> Sweep {
        Sweep {
            index: 0,
            t_begin: 0.0,
            t_end: 0.1,
            points,
        }
    }

    #[test]
    fn stationary_undistortion_is_extrinsic() {
        let ext = extrinsic();
        let x = NavState {
            translation: Vec3::new(3.0, -1.0, 0.5),
            rotation: so3_exp(&Vec3::new(0.1, 0.2, -0.3)),
            ..NavState::at(0.0)
        };
        let s = sweep(vec![
            pt(1.0, 2.0, 3.0, 0.0),
            pt(-4.0, 0.5, 1.0, 0.05),
            pt(2.0, 2.0, 2.0, 0.1),
        ]);
        let out = undistort_uniform(
            &s,
            &x,
            &NavState {
                timestamp: 0.1,
                ..x
            },
            &ext,
        )
        .unwrap();
        for (o, p) in out.iter().zip(&s.points) {
            assert!((o.position - ext.transform_point(&p.position)).norm() < 1e-12);
            assert_eq!(o.timestamp, p.timestamp);
        }
    }

    #[test]
    fn uniform_translation_closed_form() {
        let xb = NavState::at(0.0);
        let xe = NavState {
            translation: Vec3::new(1.0, 0.0, 0.0),
            ..NavState::at(0.1)
        };
        let s = sweep(vec![
            pt(0.0, 0.0, 0.0, 0.05),
            pt(0.0, 0.0, 0.0, 0.1),
            pt(1.0, 1.0, 0.0, 0.025),
        ]);
        let out = undistort_uniform(&s, &xb, &xe, &Pose::identity()).unwrap();
        // point captured half-way is half a metre behind the end frame
        assert!((out[0].position - Vec3::new(-0.5, 0.0, 0.0)).norm() < 1e-12);
        assert_eq!(out[1].position, Vec3::zeros());
        assert!((out[2].position - Vec3::new(0.25, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn end_point_gets_only_extrinsic() {
        let ext = extrinsic();
        let xb = NavState::at(0.0);
        let xe = NavState {
            translation: Vec3::new(1.0, 2.0, 0.0),
            rotation: so3_exp(&Vec3::new(0.0, 0.0, 0.4)),
            ..NavState::at(0.1)
        };
        let s = sweep(vec![pt(5.0, 1.0, -1.0, 0.1)]);
        let out = undistort_uniform(&s, &xb, &xe, &ext).unwrap();
        assert_eq!(out[0].position, ext.transform_point(&s.points[0].position));
    }

    #[test]
    fn undistortion_rejects_bad_input() {
        let mut bad = NavState::at(0.0);
        bad.translation.x = f64::NAN;
        let s = sweep(vec![pt(1.0, 0.0, 0.0, 0.05)]);
        assert_eq!(
            undistort_uniform(&s, &bad, &NavState::at(0.1), &Pose::identity()),
            Err(PreprocessError::NonFiniteState)
        );
        let late = sweep(vec![pt(1.0, 0.0, 0.0, 0.5)]);
        assert!(matches!(
            undistort_uniform(
                &late,
                &NavState::at(0.0),
                &NavState::at(0.1),
                &Pose::identity()
            ),
            Err(PreprocessError::PointOutsideSweep { .. })
        ));
    }

    fn imu_stream(acc: Vec3, gyro: Vec3) -> Vec<ImuSample> {
        (0..=40)
            .map(|k| ImuSample::new(-0.05 + k as f64 * 0.005, acc, gyro))
            .collect()
    }

    #[test]
    fn imu_stationary_matches_uniform() {
        let g = Vec3::new(0.0, 0.0, 9.81);
        let ext = extrinsic();
        let imu = imu_stream(g, Vec3::zeros());
        let x = NavState::at(0.0);
        let s = sweep(vec![
            pt(1.0, 2.0, 3.0, 0.013),
            pt(-4.0, 0.5, 1.0, 0.05),
            pt(2.0, 2.0, 2.0, 0.1),
        ]);
        let a = undistort_imu(&s, &imu, &x, &ext, &g).unwrap();
        let b = undistort_uniform(&s, &x, &NavState::at(0.1), &ext).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p.position - q.position).norm() < 1e-12);
        }
    }

    #[test]
    fn imu_constant_velocity_matches_uniform() {
        let g = Vec3::new(0.0, 0.0, 9.81);
        let ext = extrinsic();
        let rot = Rotation::from_axis_angle(&Vec3::new(0.2, 0.1, 1.0), 0.7);
        let imu = imu_stream(rot.inverse_rotate(&g), Vec3::zeros());
        let xb = NavState {
            rotation: rot,
            velocity: Vec3::new(2.0, -1.0, 0.3),
            ..NavState::at(0.0)
        };
        let xe = NavState {
            translation: xb.velocity * 0.1,
            ..NavState {
                timestamp: 0.1,
                ..xb
            }
        };
        let s = sweep(
            (0..50)
                .map(|i| pt(i as f64 * 0.1, 3.0, -1.0, i as f64 * 0.002))
                .collect(),
        );
        let a = undistort_imu(&s, &imu, &xb, &ext, &g).unwrap();
        let b = undistort_uniform(&s, &xb, &xe, &ext).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p.position - q.position).norm() < 1e-6);
        }
    }

    #[test]
    fn imu_coverage_error() {
        let g = Vec3::new(0.0, 0.0, 9.81);
        let imu: Vec<_> = imu_stream(g, Vec3::zeros())
            .into_iter()
            .filter(|s| s.timestamp < 0.06)
            .collect();
        let s = sweep(vec![pt(1.0, 0.0, 0.0, 0.05)]);
        assert!(matches!(
            undistort_imu(&s, &imu, &NavState::at(0.0), &Pose::identity(), &g),
            Err(PreprocessError::Imu(ImuError::Coverage { .. }))
        ));
    }
}
