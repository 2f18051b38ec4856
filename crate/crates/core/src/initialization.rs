//! Static initialization of gravity, biases and the initial state.

use thiserror::Error;

use crate::geometry::{NavState, Rotation, Vec3};
use crate::imu::{ImuNoiseModel, ImuSample};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InitError {
    #[error("initialization needs {needed:.3} s of IMU data, got {got:.3} s")]
    InsufficientSamples { needed: f64, got: f64 },
    #[error("platform not stationary: accel-norm variance {variance:.4} exceeds {threshold:.4}")]
    NotStationary { variance: f64, threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    /// Length of the stationary window, seconds.
    pub window: f64,
    /// Maximum accepted variance of ‖â‖, (m/s²)².
    pub max_accel_variance: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            window: 1.0,
            max_accel_variance: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitResult {
    pub gravity: Vec3,
    pub bias_acc: Vec3,
    pub bias_gyro: Vec3,
    pub state: NavState,
    /// Variance of the accelerometer norm over the window.
    pub accel_norm_variance: f64,
}

/// Estimates gravity and biases from the first `config.window` seconds of
/// `samples`, assuming the platform is at rest. The world frame has z
/// opposing gravity and zero initial yaw; the returned state sits at the
/// origin with zero velocity, stamped at the end of the window.
pub fn static_init(
    samples: &[ImuSample],
    config: &InitConfig,
    noise: &ImuNoiseModel,
) -> Result<InitResult, InitError> {
    let Some(first) = samples.first() else {
        return Err(InitError::InsufficientSamples {
            needed: config.window,
            got: 0.0,
        });
    };
    let t_end = first.timestamp + config.window;
    let window: Vec<_> = samples
        .iter()
        .take_while(|s| s.timestamp <= t_end + 1e-9)
        .collect();
    let span = window.last().unwrap().timestamp - first.timestamp;
    if span < config.window - 1e-9 || window.len() < 2 {
        return Err(InitError::InsufficientSamples {
            needed: config.window,
            got: span,
        });
    }

    let n = window.len() as f64;
    let mean_acc = window.iter().map(|s| s.acc).sum::<Vec3>() / n;
    let mean_gyro = window.iter().map(|s| s.gyro).sum::<Vec3>() / n;
    let mean_norm = window.iter().map(|s| s.acc.norm()).sum::<f64>() / n;
    let variance = window
        .iter()
        .map(|s| (s.acc.norm() - mean_norm).powi(2))
        .sum::<f64>()
        / n;
    if variance > config.max_accel_variance {
        return Err(InitError::NotStationary {
            variance,
            threshold: config.max_accel_variance,
        });
    }

    let rotation = level_rotation(&mean_acc);
    let gravity = Vec3::new(0.0, 0.0, noise.gravity_norm);
    let bias_acc = mean_acc - rotation.inverse_rotate(&gravity);
    let state = NavState {
        timestamp: window.last().unwrap().timestamp,
        translation: Vec3::zeros(),
        rotation,
        velocity: Vec3::zeros(),
        bias_acc,
        bias_gyro: mean_gyro,
    };
    Ok(InitResult {
        gravity,
        bias_acc,
        bias_gyro: mean_gyro,
        state,
        accel_norm_variance: variance,
    })
}

/// Body-to-world rotation mapping `up_body` onto +z, with zero yaw.
pub fn level_rotation(up_body: &Vec3) -> Rotation {
    let up = up_body.normalize();
    let z = Vec3::z();
    let axis = up.cross(&z);
    let s = axis.norm();
    let c = up.dot(&z);
    let tilt = if s < 1e-12 {
        if c > 0.0 {
            Rotation::identity()
        } else {
            Rotation::from_axis_angle(&Vec3::x(), std::f64::consts::PI)
        }
    } else {
        Rotation::from_axis_angle(&axis, s.atan2(c))
    };
    // remove heading so the body x-axis projects onto the world x-z plane
    let m = tilt.matrix();
    let yaw = m[(1, 0)].atan2(m[(0, 0)]);
    Rotation::from_axis_angle(&z, -yaw).compose(&tilt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imu::propagate_window;

    fn stream(acc: Vec3, gyro: Vec3, duration: f64) -> Vec<ImuSample> {
        let n = (duration * 200.0).round() as usize;
        (0..=n)
            .map(|k| ImuSample::new(k as f64 / 200.0, acc, gyro))
            .collect()
    }

    #[test]
    fn level_stationary() {
        let s = stream(Vec3::new(0.0, 0.0, 9.81), Vec3::zeros(), 1.5);
        let r = static_init(&s, &InitConfig::default(), &ImuNoiseModel::default()).unwrap();
        assert_eq!(r.bias_gyro, Vec3::zeros());
        assert!(r.bias_acc.norm() < 1e-12);
        assert!(r.state.rotation.angle_to(&Rotation::identity()) < 1e-12);
        assert_eq!(r.state.velocity, Vec3::zeros());
        assert!((r.gravity.norm() - 9.81).abs() < 1e-15);
        assert!((r.state.timestamp - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pure_gyro_bias() {
        let s = stream(Vec3::new(0.0, 0.0, 9.81), Vec3::new(0.01, 0.0, 0.0), 1.0);
        let r = static_init(&s, &InitConfig::default(), &ImuNoiseModel::default()).unwrap();
        assert!((r.bias_gyro - Vec3::new(0.01, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn tilted_platform() {
        let roll = 10f64.to_radians();
        // body rotated by +roll about x: gravity reaction seen in body frame
        let body_to_world = Rotation::from_axis_angle(&Vec3::x(), roll);
        let acc = body_to_world.inverse_rotate(&Vec3::new(0.0, 0.0, 9.81));
        let s = stream(acc, Vec3::zeros(), 1.0);
        let r = static_init(&s, &InitConfig::default(), &ImuNoiseModel::default()).unwrap();
        let up = r.state.rotation.rotate(&acc).normalize();
        assert!(up.dot(&Vec3::z()).min(1.0).acos() < 1e-6);
        assert!(r.state.rotation.angle_to(&body_to_world) < 1e-9);
    }

    #[test]
    fn gravity_norm_is_configured_value() {
        let s = stream(Vec3::new(0.0, 0.3, 10.2), Vec3::zeros(), 1.0);
        let r = static_init(&s, &InitConfig::default(), &ImuNoiseModel::default()).unwrap();
        assert_eq!(r.gravity.norm(), 9.81);
    }

    #[test]
    fn rejects_motion_and_short_buffers() {
        let mut s = stream(Vec3::new(0.0, 0.0, 9.81), Vec3::zeros(), 1.0);
        for (k, x) in s.iter_mut().enumerate() {
            x.acc.x = if k % 2 == 0 { 3.0 } else { -3.0 };
            x.acc.z = 9.81 + if k % 3 == 0 { 1.0 } else { -0.5 };
        }
        assert!(matches!(
            static_init(&s, &InitConfig::default(), &ImuNoiseModel::default()),
            Err(InitError::NotStationary { .. })
        ));
        let short = stream(Vec3::new(0.0, 0.0, 9.81), Vec3::zeros(), 0.5);
        assert!(matches!(
            static_init(&short, &InitConfig::default(), &ImuNoiseModel::default()),
            Err(InitError::InsufficientSamples { .. })
        ));
        assert!(static_init(&[], &InitConfig::default(), &ImuNoiseModel::default()).is_err());
    }

    #[test]
    fn prediction_after_init_stays_put() {
        let roll = 5f64.to_radians();
        let tilt = Rotation::from_axis_angle(&Vec3::new(1.0, 1.0, 0.0), roll);
        let acc = tilt.inverse_rotate(&Vec3::new(0.0, 0.0, 9.81)) + Vec3::new(0.0, 0.0, 0.05);
        let gyro = Vec3::new(0.002, -0.001, 0.003);
        let s = stream(acc, gyro, 1.0);
        let r = static_init(&s, &InitConfig::default(), &ImuNoiseModel::default()).unwrap();
        let mut x0 = r.state;
        x0.timestamp = 0.0;
        let states = propagate_window(&x0, &s, &r.gravity);
        let last = states.last().unwrap();
        assert!(last.translation.norm() < 1e-9);
        assert!(last.velocity.norm() < 1e-9);
        assert!(last.rotation.angle_to(&x0.rotation) < 1e-9);
    }
}
