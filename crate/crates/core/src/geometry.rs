//! Rotation, pose and navigation-state algebra on SO(3)/SE(3).
//!
//! Quaternions are stored as (w, x, y, z) with the canonical sign `w >= 0`.
//! Rotation perturbations are applied on the right: `q ⊗ exp(δθ)`.

use nalgebra::{Matrix3, Quaternion, SVector, UnitQuaternion, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
/// Error-state vector of one [`NavState`], ordered (δt, δθ, δv, δb_a, δb_ω).
pub type Vector15 = SVector<f64, 15>;

/// Below this angle exp/log/Jacobians switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Offsets of each block inside the 15-dim error state.
pub const IDX_T: usize = 0;
pub const IDX_R: usize = 3;
pub const IDX_V: usize = 6;
pub const IDX_BA: usize = 9;
pub const IDX_BG: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("interpolation factor {0} outside [0, 1]")]
    InterpolationOutOfRange(f64),
}

/// Unit quaternion rotation kept in canonical form (`w >= 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self(UnitQuaternion::identity())
    }

    /// Builds from raw (w, x, y, z) components, normalizing and canonicalizing.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self::from_quaternion(Quaternion::new(w, x, y, z))
    }

    pub fn from_quaternion(q: Quaternion<f64>) -> Self {
        let q = UnitQuaternion::from_quaternion(q);
        Self(canonical(q))
    }

    pub fn from_unit_quaternion(q: UnitQuaternion<f64>) -> Self {
        Self(canonical(UnitQuaternion::new_normalize(q.into_inner())))
    }

    pub fn from_matrix(m: &Mat3) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*m);
        Self::from_unit_quaternion(UnitQuaternion::from_rotation_matrix(&rot))
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        so3_exp(&(axis.normalize() * angle))
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    pub fn w(&self) -> f64 {
        self.0.w
    }

    /// Vector part (x, y, z).
    pub fn xyz(&self) -> Vec3 {
        self.0.imag()
    }

    pub fn matrix(&self) -> Mat3 {
        self.0.to_rotation_matrix().into_inner()
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0.transform_vector(v)
    }

    pub fn inverse_rotate(&self, v: &Vec3) -> Vec3 {
        self.0.inverse_transform_vector(v)
    }

    /// `self ⊗ rhs`, renormalized.
    pub fn compose(&self, rhs: &Rotation) -> Self {
        Self::from_quaternion(self.0.into_inner() * rhs.0.into_inner())
    }

    /// Geodesic angle between two rotations, in [0, π].
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        so3_log(&self.inverse().compose(other)).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.0.coords.iter().all(|c| c.is_finite())
    }
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

pub fn skew(v: &Vec3) -> Mat3 {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map from a rotation vector (radians) to a rotation.
pub fn so3_exp(omega: &Vec3) -> Rotation {
    let theta = omega.norm();
    let (w, s) = if theta < SMALL_ANGLE {
        // cos(θ/2) ≈ 1 - θ²/8, sin(θ/2)/θ ≈ 1/2 - θ²/48
        let t2 = theta * theta;
        (1.0 - t2 / 8.0, 0.5 - t2 / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    Rotation::from_wxyz(w, s * omega.x, s * omega.y, s * omega.z)
}

/// Logarithm map. The result lies in the ball `‖ω‖ <= π`; a rotation of
/// exactly π (w = 0) maps to `+π` times the quaternion's axis.
pub fn so3_log(r: &Rotation) -> Vec3 {
    let q = r.quaternion();
    let (w, v) = (q.w, q.imag());
    let n = v.norm();
    if n < SMALL_ANGLE {
        // 2 atan(n / w) / n ≈ 2 / w (1 - n²/(3w²))
        return v * (2.0 / w) * (1.0 - n * n / (3.0 * w * w));
    }
    v * (2.0 * n.atan2(w) / n)
}

/// Right Jacobian of SO(3).
pub fn right_jacobian(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < SMALL_ANGLE {
        return Mat3::identity() - 0.5 * k + k * k / 6.0;
    }
    let t2 = theta * theta;
    Mat3::identity() - (1.0 - theta.cos()) / t2 * k + (theta - theta.sin()) / (t2 * theta) * k * k
}

/// Inverse of the right Jacobian of SO(3).
pub fn right_jacobian_inv(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < SMALL_ANGLE {
        return Mat3::identity() + 0.5 * k + k * k / 12.0;
    }
    let t2 = theta * theta;
    let coeff = 1.0 / t2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Mat3::identity() + 0.5 * k + coeff * k * k
}

/// Rigid transform mapping a point from a child frame into a parent frame:
/// `p_parent = rotation * p_child + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(Rotation::identity(), translation)
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse_rotate(&(p - self.translation))
    }

    /// `self ∘ rhs`.
    pub fn compose(&self, rhs: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&rhs.rotation),
            translation: self.transform_point(&rhs.translation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let rotation = self.rotation.inverse();
        Pose {
            rotation,
            translation: -rotation.rotate(&self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Interpolates between two poses: slerp on the shortest arc for rotation,
/// linear for translation. `alpha = 0` returns `a`, `alpha = 1` returns `b`.
pub fn interpolate_pose(a: &Pose, b: &Pose, alpha: f64) -> Result<Pose, GeometryError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GeometryError::InterpolationOutOfRange(alpha));
    }
    Ok(interpolate_pose_unchecked(a, b, alpha))
}

pub(crate) fn interpolate_pose_unchecked(a: &Pose, b: &Pose, alpha: f64) -> Pose {
    if alpha == 0.0 {
        return *a;
    }
    if alpha == 1.0 {
        return *b;
    }
    let delta = so3_log(&a.rotation.inverse().compose(&b.rotation));
    Pose {
        rotation: a.rotation.compose(&so3_exp(&(delta * alpha))),
        translation: a.translation * (1.0 - alpha) + b.translation * alpha,
    }
}

/// Full navigation state at one timestamp. `rotation` maps IMU-frame
/// vectors into the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NavState {
    pub timestamp: f64,
    pub translation: Vec3,
    pub rotation: Rotation,
    pub velocity: Vec3,
    pub bias_acc: Vec3,
    pub bias_gyro: Vec3,
}

impl NavState {
    pub fn at(timestamp: f64) -> Self {
        Self {
            timestamp,
            ..Default::default()
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.translation)
    }

    pub fn with_pose(mut self, pose: &Pose) -> Self {
        self.rotation = pose.rotation;
        self.translation = pose.translation;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.timestamp.is_finite()
            && self.rotation.is_finite()
            && [
                self.translation,
                self.velocity,
                self.bias_acc,
                self.bias_gyro,
            ]
            .iter()
            .all(|v| v.iter().all(|c| c.is_finite()))
    }

    /// Error-state retraction: additive on vectors, `q ⊗ exp(δθ)` on rotation.
    pub fn boxplus(&self, delta: &Vector15) -> NavState {
        let block = |i: usize| delta.fixed_rows::<3>(i).into_owned();
        NavState {
            timestamp: self.timestamp,
            translation: self.translation + block(IDX_T),
            rotation: self.rotation.compose(&so3_exp(&block(IDX_R))),
            velocity: self.velocity + block(IDX_V),
            bias_acc: self.bias_acc + block(IDX_BA),
            bias_gyro: self.bias_gyro + block(IDX_BG),
        }
    }

    /// Inverse of [`boxplus`](Self::boxplus): `self.boxplus(&self.boxminus(o)) == o`.
    pub fn boxminus(&self, other: &NavState) -> Vector15 {
        let mut d = Vector15::zeros();
        d.fixed_rows_mut::<3>(IDX_T)
            .copy_from(&(other.translation - self.translation));
        d.fixed_rows_mut::<3>(IDX_R)
            .copy_from(&so3_log(&self.rotation.inverse().compose(&other.rotation)));
        d.fixed_rows_mut::<3>(IDX_V)
            .copy_from(&(other.velocity - self.velocity));
        d.fixed_rows_mut::<3>(IDX_BA)
            .copy_from(&(other.bias_acc - self.bias_acc));
        d.fixed_rows_mut::<3>(IDX_BG)
            .copy_from(&(other.bias_gyro - self.bias_gyro));
        d
    }
}
