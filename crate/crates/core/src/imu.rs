//! IMU samples, midpoint propagation and pre-integration between sweep ends.
//!
//! Measurement model: `â = a + b_a + R_wᵀ g + n_a`, `ω̂ = ω + b_ω + n_ω`, where
//! `g` is the world gravity reaction vector (pointing up, ≈ (0, 0, 9.81) for a
//! z-up world). A stationary level IMU therefore reads `â = (0, 0, 9.81)`.
//!
//! Each integration step averages the bias-corrected specific force after
//! rotating it with the attitude at both ends of the step, and rotates with
//! the averaged angular rate. World-frame propagation ([`propagate`]) and
//! pre-integration ([`integrate`]) use the same step so that they agree to
//! rounding error.

use nalgebra::{SMatrix, SVector};
use thiserror::Error;

use crate::geometry::{
    right_jacobian, skew, so3_exp, Mat3, NavState, Rotation, Vec3, IDX_BA, IDX_BG, IDX_R, IDX_T,
    IDX_V,
};

pub type Matrix15 = SMatrix<f64, 15, 15>;
pub type Matrix15x30 = SMatrix<f64, 15, 30>;
type Matrix15x18 = SMatrix<f64, 15, 18>;

/// Timestamps closer than this are treated as the same instant.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImuError {
    #[error("pre-integration needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("IMU timestamps not strictly increasing at {0:.9}")]
    NonMonotonic(f64),
    #[error("IMU data does not cover [{start:.6}, {end:.6}]")]
    Coverage { start: f64, end: f64 },
    #[error("IMU gap of {gap:.6} s at {at:.6} exceeds twice the nominal period {period:.6} s")]
    Gap { at: f64, gap: f64, period: f64 },
    #[error("pre-integration spans {preint:.6} s but states are {states:.6} s apart")]
    TimestampMismatch { preint: f64, states: f64 },
    #[error("non-finite bias or measurement")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    /// Specific force, m/s².
    pub acc: Vec3,
    /// Angular rate, rad/s.
    pub gyro: Vec3,
}

impl ImuSample {
    pub fn new(timestamp: f64, acc: Vec3, gyro: Vec3) -> Self {
        Self {
            timestamp,
            acc,
            gyro,
        }
    }

    /// Linear interpolation of two samples at time `t`.
    pub fn lerp(a: &ImuSample, b: &ImuSample, t: f64) -> ImuSample {
        let span = b.timestamp - a.timestamp;
        let s = if span > 0.0 {
            (t - a.timestamp) / span
        } else {
            0.0
        };
        ImuSample {
            timestamp: t,
            acc: a.acc + (b.acc - a.acc) * s,
            gyro: a.gyro + (b.gyro - a.gyro) * s,
        }
    }
}

/// Noise parameters. `sigma_acc`/`sigma_gyro` are per-sample standard
/// deviations of the white measurement noise; the bias terms are random-walk
/// densities (units per √s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuNoiseModel {
    pub sigma_acc: f64,
    pub sigma_gyro: f64,
    pub sigma_acc_bias: f64,
    pub sigma_gyro_bias: f64,
    pub gravity_norm: f64,
}

impl Default for ImuNoiseModel {
    fn default() -> Self {
        Self {
            sigma_acc: 0.02,
            sigma_gyro: 0.002,
            sigma_acc_bias: 1e-3,
            sigma_gyro_bias: 1e-4,
            gravity_norm: 9.81,
        }
    }
}

impl ImuNoiseModel {
    /// All densities zero; used to synthesize perfect measurements.
    pub fn noiseless() -> Self {
        Self {
            sigma_acc: 0.0,
            sigma_gyro: 0.0,
            sigma_acc_bias: 0.0,
            sigma_gyro_bias: 0.0,
            ..Self::default()
        }
    }

    /// Densities non-negative and gravity positive, all finite.
    pub fn is_valid(&self) -> bool {
        [
            self.sigma_acc,
            self.sigma_gyro,
            self.sigma_acc_bias,
            self.sigma_gyro_bias,
        ]
        .iter()
        .all(|v| v.is_finite() && *v >= 0.0)
            && self.gravity_norm.is_finite()
            && self.gravity_norm > 0.0
    }
}

/// One midpoint step of the world-frame state from `s0` to `s1`, with the
/// state's own biases held constant.
pub fn propagate(state: &NavState, s0: &ImuSample, s1: &ImuSample, gravity: &Vec3) -> NavState {
    let dt = s1.timestamp - s0.timestamp;
    let omega = (s0.gyro + s1.gyro) * 0.5 - state.bias_gyro;
    let rot1 = state.rotation.compose(&so3_exp(&(omega * dt)));
    let f0 = state.rotation.rotate(&(s0.acc - state.bias_acc)) - gravity;
    let f1 = rot1.rotate(&(s1.acc - state.bias_acc)) - gravity;
    let f = (f0 + f1) * 0.5;
    NavState {
        timestamp: s1.timestamp,
        translation: state.translation + state.velocity * dt + f * (0.5 * dt * dt),
        rotation: rot1,
        velocity: state.velocity + f * dt,
        bias_acc: state.bias_acc,
        bias_gyro: state.bias_gyro,
    }
}

/// Propagates `state` through a window of samples starting at the state's
/// timestamp. Returns the state at every sample time (first entry = input).
pub fn propagate_window(state: &NavState, window: &[ImuSample], gravity: &Vec3) -> Vec<NavState> {
    let mut out = Vec::with_capacity(window.len());
    let mut x = *state;
    x.timestamp = window.first().map_or(state.timestamp, |s| s.timestamp);
    out.push(x);
    for pair in window.windows(2) {
        x = propagate(&x, &pair[0], &pair[1], gravity);
        out.push(x);
    }
    out
}

fn nominal_period(samples: &[ImuSample]) -> f64 {
    let mut dts: Vec<f64> = samples
        .windows(2)
        .map(|w| w[1].timestamp - w[0].timestamp)
        .filter(|d| *d > TIME_EPS)
        .collect();
    if dts.is_empty() {
        return f64::INFINITY;
    }
    dts.sort_by(f64::total_cmp);
    dts[dts.len() / 2]
}

/// Extracts the samples covering `[start, end]`, inserting linearly
/// interpolated samples at both boundaries when no sample falls exactly on
/// them. Fails if the stream does not cover the interval or if it contains a
/// gap larger than twice its median sample period.
pub fn imu_window(samples: &[ImuSample], start: f64, end: f64) -> Result<Vec<ImuSample>, ImuError> {
    let coverage = ImuError::Coverage { start, end };
    if samples.len() < 2 || end <= start {
        return Err(coverage);
    }
    if samples.first().unwrap().timestamp > start + TIME_EPS
        || samples.last().unwrap().timestamp < end - TIME_EPS
    {
        return Err(coverage);
    }
    let period = nominal_period(samples);

    // last sample at or before `start`
    let first = samples.partition_point(|s| s.timestamp <= start + TIME_EPS) - 1;
    // first sample at or after `end`
    let last = samples
        .partition_point(|s| s.timestamp < end - TIME_EPS)
        .min(samples.len() - 1);

    let mut out = Vec::with_capacity(last - first + 2);
    let head = &samples[first];
    out.push(if (head.timestamp - start).abs() <= TIME_EPS {
        ImuSample {
            timestamp: start,
            ..*head
        }
    } else {
        ImuSample::lerp(head, &samples[first + 1], start)
    });
    for s in &samples[first + 1..last] {
        out.push(*s);
    }
    let tail = &samples[last];
    out.push(if (tail.timestamp - end).abs() <= TIME_EPS {
        ImuSample {
            timestamp: end,
            ..*tail
        }
    } else {
        ImuSample::lerp(&samples[last - 1], tail, end)
    });

    for w in samples[first..=last].windows(2) {
        let gap = w[1].timestamp - w[0].timestamp;
        if gap <= 0.0 {
            return Err(ImuError::NonMonotonic(w[1].timestamp));
        }
        if gap > 2.0 * period + TIME_EPS {
            return Err(ImuError::Gap {
                at: w[0].timestamp,
                gap,
                period,
            });
        }
    }
    Ok(out)
}

/// Pre-integrated IMU measurements between two instants, expressed in the
/// IMU frame at the first sample.
///
/// Error-state and residual ordering is (α, θ, β, b_a, b_ω), matching the
/// (δt, δθ, δv, δb_a, δb_ω) layout of [`NavState`] error states.
#[derive(Debug, Clone, PartialEq)]
pub struct Preintegration {
    /// Translation pre-integral α̂.
    pub delta_p: Vec3,
    /// Velocity pre-integral β̂.
    pub delta_v: Vec3,
    /// Rotation pre-integral γ̂.
    pub delta_q: Rotation,
    pub dt: f64,
    pub covariance: Matrix15,
    /// Accumulated first-order transition; its bias columns are the bias Jacobians.
    pub jacobian: Matrix15,
    pub bias_acc_ref: Vec3,
    pub bias_gyro_ref: Vec3,
    /// Largest sample spacing inside the window.
    pub max_step: f64,
}

impl Preintegration {
    fn block(&self, row: usize, col: usize) -> Mat3 {
        self.jacobian.fixed_view::<3, 3>(row, col).into_owned()
    }

    pub fn j_alpha_ba(&self) -> Mat3 {
        self.block(IDX_T, IDX_BA)
    }
    pub fn j_alpha_bg(&self) -> Mat3 {
        self.block(IDX_T, IDX_BG)
    }
    pub fn j_beta_ba(&self) -> Mat3 {
        self.block(IDX_V, IDX_BA)
    }
    pub fn j_beta_bg(&self) -> Mat3 {
        self.block(IDX_V, IDX_BG)
    }
    pub fn j_gamma_bg(&self) -> Mat3 {
        self.block(IDX_R, IDX_BG)
    }

    /// First-order bias update of (α̂, β̂, γ̂) for new biases.
    pub fn bias_corrected(&self, bias_acc: &Vec3, bias_gyro: &Vec3) -> (Vec3, Vec3, Rotation) {
        let dba = bias_acc - self.bias_acc_ref;
        let dbg = bias_gyro - self.bias_gyro_ref;
        let alpha = self.delta_p + self.j_alpha_ba() * dba + self.j_alpha_bg() * dbg;
        let beta = self.delta_v + self.j_beta_ba() * dba + self.j_beta_bg() * dbg;
        let gamma = self.delta_q.compose(&so3_exp(&(self.j_gamma_bg() * dbg)));
        (alpha, beta, gamma)
    }

    /// Sets the residual whitening from the covariance: returns `L⁻¹` with
    /// `P = L Lᵀ`, so that `‖L⁻¹ r‖² = rᵀ P⁻¹ r`.
    pub fn sqrt_information(&self) -> Matrix15 {
        let sym = (self.covariance + self.covariance.transpose()) * 0.5;
        let mut jitter = 0.0;
        for _ in 0..8 {
            let p = sym + Matrix15::identity() * jitter;
            if let Some(ch) = p.cholesky() {
                if let Some(inv) = ch.l().try_inverse() {
                    return inv;
                }
            }
            jitter = if jitter == 0.0 { 1e-15 } else { jitter * 100.0 };
        }
        Matrix15::identity()
    }

    fn check_span(&self, x_b: &NavState, x_e: &NavState) -> Result<(), ImuError> {
        let states = x_e.timestamp - x_b.timestamp;
        if (states - self.dt).abs() > self.max_step.max(TIME_EPS) {
            return Err(ImuError::TimestampMismatch {
                preint: self.dt,
                states,
            });
        }
        Ok(())
    }
}

/// Pre-integrates `samples` with the given linearization biases.
pub fn integrate(
    samples: &[ImuSample],
    bias_acc: &Vec3,
    bias_gyro: &Vec3,
    noise: &ImuNoiseModel,
) -> Result<Preintegration, ImuError> {
    if samples.len() < 2 {
        return Err(ImuError::TooFewSamples(samples.len()));
    }
    if !(bias_acc
        .iter()
        .chain(bias_gyro.iter())
        .all(|v| v.is_finite()))
    {
        return Err(ImuError::NonFinite);
    }

    let mut alpha = Vec3::zeros();
    let mut beta = Vec3::zeros();
    let mut gamma = Rotation::identity();
    let mut cov = Matrix15::zeros();
    let mut jac = Matrix15::identity();
    let mut total = 0.0;
    let mut max_step: f64 = 0.0;

    let mut q = SVector::<f64, 18>::zeros();
    q.fixed_rows_mut::<3>(0).fill(noise.sigma_acc.powi(2));
    q.fixed_rows_mut::<3>(3).fill(noise.sigma_gyro.powi(2));
    q.fixed_rows_mut::<3>(6).fill(noise.sigma_acc.powi(2));
    q.fixed_rows_mut::<3>(9).fill(noise.sigma_gyro.powi(2));

    for pair in samples.windows(2) {
        let (s0, s1) = (&pair[0], &pair[1]);
        let dt = s1.timestamp - s0.timestamp;
        if !(dt > 0.0) {
            return Err(ImuError::NonMonotonic(s1.timestamp));
        }
        let a0 = s0.acc - bias_acc;
        let a1 = s1.acc - bias_acc;
        let phi = ((s0.gyro + s1.gyro) * 0.5 - bias_gyro) * dt;
        let dq = so3_exp(&phi);
        let r0 = gamma.matrix();
        let gamma1 = gamma.compose(&dq);
        let r1 = gamma1.matrix();
        let f = (r0 * a0 + r1 * a1) * 0.5;

        // Exact linearization of this step.
        let rd = dq.matrix().transpose();
        let jr = right_jacobian(&phi);
        let r1a1 = r1 * skew(&a1);
        let df_dth = -(r0 * skew(&a0) + r1a1 * rd) * 0.5;
        let df_dba = -(r0 + r1) * 0.5;
        let df_dbg = r1a1 * jr * (0.5 * dt);
        let half_dt2 = 0.5 * dt * dt;

        let mut fm = Matrix15::identity();
        fm.fixed_view_mut::<3, 3>(IDX_R, IDX_R).copy_from(&rd);
        fm.fixed_view_mut::<3, 3>(IDX_R, IDX_BG)
            .copy_from(&(-jr * dt));
        fm.fixed_view_mut::<3, 3>(IDX_V, IDX_R)
            .copy_from(&(df_dth * dt));
        fm.fixed_view_mut::<3, 3>(IDX_V, IDX_BA)
            .copy_from(&(df_dba * dt));
        fm.fixed_view_mut::<3, 3>(IDX_V, IDX_BG)
            .copy_from(&(df_dbg * dt));
        fm.fixed_view_mut::<3, 3>(IDX_T, IDX_V)
            .copy_from(&(Mat3::identity() * dt));
        fm.fixed_view_mut::<3, 3>(IDX_T, IDX_R)
            .copy_from(&(df_dth * half_dt2));
        fm.fixed_view_mut::<3, 3>(IDX_T, IDX_BA)
            .copy_from(&(df_dba * half_dt2));
        fm.fixed_view_mut::<3, 3>(IDX_T, IDX_BG)
            .copy_from(&(df_dbg * half_dt2));

        // Noise input (n_a0, n_ω0, n_a1, n_ω1, n_ba, n_bω).
        let dth_dn = -jr * (0.5 * dt);
        let df_dng = -r1a1 * dth_dn * 0.5;
        let mut gm = Matrix15x18::zeros();
        for (col, blk) in [(0, r0 * 0.5), (3, df_dng), (6, r1 * 0.5), (9, df_dng)] {
            gm.fixed_view_mut::<3, 3>(IDX_V, col).copy_from(&(blk * dt));
            gm.fixed_view_mut::<3, 3>(IDX_T, col)
                .copy_from(&(blk * half_dt2));
        }
        gm.fixed_view_mut::<3, 3>(IDX_R, 3).copy_from(&dth_dn);
        gm.fixed_view_mut::<3, 3>(IDX_R, 9).copy_from(&dth_dn);
        gm.fixed_view_mut::<3, 3>(IDX_BA, 12)
            .copy_from(&Mat3::identity());
        gm.fixed_view_mut::<3, 3>(IDX_BG, 15)
            .copy_from(&Mat3::identity());
        q.fixed_rows_mut::<3>(12)
            .fill(noise.sigma_acc_bias.powi(2) * dt);
        q.fixed_rows_mut::<3>(15)
            .fill(noise.sigma_gyro_bias.powi(2) * dt);

        cov = fm * cov * fm.transpose() + gm * SMatrix::from_diagonal(&q) * gm.transpose();
        cov = (cov + cov.transpose()) * 0.5;
        jac = fm * jac;

        alpha += beta * dt + f * half_dt2;
        beta += f * dt;
        gamma = gamma1;
        total += dt;
        max_step = max_step.max(dt);
    }

    Ok(Preintegration {
        delta_p: alpha,
        delta_v: beta,
        delta_q: gamma,
        dt: total,
        covariance: cov,
        jacobian: jac,
        bias_acc_ref: *bias_acc,
        bias_gyro_ref: *bias_gyro,
        max_step,
    })
}

/// 2·vec(q) of a quaternion.
fn twice_vec(q: &Rotation) -> Vec3 {
    q.xyz() * 2.0
}

/// Pre-integration residual between `x_b` and `x_e`, ordered (α, θ, β, b_a, b_ω).
/// Bias corrections use the biases of `x_b`.
pub fn imu_residual(
    pre: &Preintegration,
    x_b: &NavState,
    x_e: &NavState,
    gravity: &Vec3,
) -> Result<SVector<f64, 15>, ImuError> {
    pre.check_span(x_b, x_e)?;
    Ok(residual_unchecked(pre, x_b, x_e, gravity))
}

pub(crate) fn residual_unchecked(
    pre: &Preintegration,
    x_b: &NavState,
    x_e: &NavState,
    gravity: &Vec3,
) -> SVector<f64, 15> {
    let dt = pre.dt;
    let (alpha, beta, gamma) = pre.bias_corrected(&x_b.bias_acc, &x_b.bias_gyro);
    let dp = x_e.translation - x_b.translation + gravity * (0.5 * dt * dt) - x_b.velocity * dt;
    let dv = x_e.velocity + gravity * dt - x_b.velocity;
    let q_err = x_b
        .rotation
        .inverse()
        .compose(&x_e.rotation)
        .compose(&gamma.inverse());

    let mut r = SVector::<f64, 15>::zeros();
    r.fixed_rows_mut::<3>(IDX_T)
        .copy_from(&(x_b.rotation.inverse_rotate(&dp) - alpha));
    r.fixed_rows_mut::<3>(IDX_R).copy_from(&twice_vec(&q_err));
    r.fixed_rows_mut::<3>(IDX_V)
        .copy_from(&(x_b.rotation.inverse_rotate(&dv) - beta));
    r.fixed_rows_mut::<3>(IDX_BA)
        .copy_from(&(x_e.bias_acc - x_b.bias_acc));
    r.fixed_rows_mut::<3>(IDX_BG)
        .copy_from(&(x_e.bias_gyro - x_b.bias_gyro));
    r
}

/// Left-multiplication block: ∂ 2·vec(Q ⊗ exp(δ)) / ∂δ.
pub(crate) fn quat_left_block(q: &Rotation) -> Mat3 {
    Mat3::identity() * q.w() + skew(&q.xyz())
}

/// Right-multiplication block: ∂ 2·vec(exp(δ) ⊗ Q) / ∂δ.
pub(crate) fn quat_right_block(q: &Rotation) -> Mat3 {
    Mat3::identity() * q.w() - skew(&q.xyz())
}

/// Analytic Jacobian of [`imu_residual`] with respect to the error states of
/// `x_b` (columns 0..15) and `x_e` (columns 15..30).
pub fn residual_jacobian(
    pre: &Preintegration,
    x_b: &NavState,
    x_e: &NavState,
    gravity: &Vec3,
) -> Matrix15x30 {
    let dt = pre.dt;
    let (_, _, gamma) = pre.bias_corrected(&x_b.bias_acc, &x_b.bias_gyro);
    let rbt = x_b.rotation.matrix().transpose();
    let dp = x_e.translation - x_b.translation + gravity * (0.5 * dt * dt) - x_b.velocity * dt;
    let dv = x_e.velocity + gravity * dt - x_b.velocity;
    let q_err = x_b
        .rotation
        .inverse()
        .compose(&x_e.rotation)
        .compose(&gamma.inverse());
    let left = quat_left_block(&q_err) * gamma.matrix();
    let phi = pre.j_gamma_bg() * (x_b.bias_gyro - pre.bias_gyro_ref);

    let e = 15;
    let mut j = Matrix15x30::zeros();
    let mut set = |r: usize, c: usize, m: Mat3| j.fixed_view_mut::<3, 3>(r, c).copy_from(&m);
    let id = Mat3::identity();

    set(IDX_T, IDX_T, -rbt);
    set(IDX_T, IDX_R, skew(&(rbt * dp)));
    set(IDX_T, IDX_V, -rbt * dt);
    set(IDX_T, IDX_BA, -pre.j_alpha_ba());
    set(IDX_T, IDX_BG, -pre.j_alpha_bg());
    set(IDX_T, e + IDX_T, rbt);

    set(IDX_R, IDX_R, -quat_right_block(&q_err));
    set(
        IDX_R,
        IDX_BG,
        -left * right_jacobian(&phi) * pre.j_gamma_bg(),
    );
    set(IDX_R, e + IDX_R, left);

    set(IDX_V, IDX_R, skew(&(rbt * dv)));
    set(IDX_V, IDX_V, -rbt);
    set(IDX_V, IDX_BA, -pre.j_beta_ba());
    set(IDX_V, IDX_BG, -pre.j_beta_bg());
    set(IDX_V, e + IDX_V, rbt);

    set(IDX_BA, IDX_BA, -id);
    set(IDX_BA, e + IDX_BA, id);
    set(IDX_BG, IDX_BG, -id);
    set(IDX_BG, e + IDX_BG, id);
    j
}
