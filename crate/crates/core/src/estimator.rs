//! Per-sweep state prediction and joint optimization of the begin/end states.
//!
//! The variable vector is the pair (x_b, x_e), laid out as a 30-dim error
//! state: x_b in `0..15`, x_e in `15..30`, each ordered (δt, δθ, δv, δb_a, δb_ω).
//! Three residual families enter the objective:
//!
//! * point-to-plane, `ω_p (nᵀ p_w + d)`, whitened by the point variance `P_L`
//!   and robustified per point with a Huber kernel;
//! * IMU pre-integration, whitened by the inverse pre-integration covariance;
//! * logical consistency between x_b and the previous sweep's end state,
//!   weighted by `logical_weight`.
//!
//! [`Mode`] selects which states move and how the point residuals see them.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{
    right_jacobian, right_jacobian_inv, skew, so3_exp, so3_log, NavState, Pose, Vec3, Vector15,
    IDX_R, IDX_T,
};
use crate::imu::{
    propagate_window, quat_left_block, residual_jacobian, residual_unchecked, ImuError, ImuSample,
    Matrix15, Preintegration,
};
use crate::preprocessing::{undistort_imu, undistort_uniform, PreprocessError, Sweep, TimedPoint};
use crate::voxel_map::{fit_plane_min, PlaneFit, VoxelMap};

pub type Vector30 = SVector<f64, 30>;
pub type Matrix30 = SMatrix<f64, 30, 30>;
type Row6 = SMatrix<f64, 1, 6>;
type Row12 = SMatrix<f64, 1, 12>;

const E: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// x_b frozen to the previous end state; only x_e is optimized.
    Traditional,
    /// Both states optimized; points use per-point interpolated poses.
    Elastic,
    /// Both states optimized; points constrain x_e only.
    #[default]
    SemiElastic,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Traditional, Mode::Elastic, Mode::SemiElastic];
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Traditional => "traditional",
            Mode::Elastic => "elastic",
            Mode::SemiElastic => "semi-elastic",
        })
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "traditional" => Ok(Mode::Traditional),
            "elastic" => Ok(Mode::Elastic),
            "semi-elastic" | "semi_elastic" | "semielastic" => Ok(Mode::SemiElastic),
            other => Err(format!("unknown mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UndistortMode {
    #[default]
    Uniform,
    Imu,
}

impl fmt::Display for UndistortMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UndistortMode::Uniform => "uniform",
            UndistortMode::Imu => "imu",
        })
    }
}

impl FromStr for UndistortMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(UndistortMode::Uniform),
            "imu" => Ok(UndistortMode::Imu),
            other => Err(format!("unknown undistortion variant '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig {
    pub mode: Mode,
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    /// Convergence threshold on the norm of the error-state step.
    pub tolerance: f64,
    /// Huber threshold on whitened point residuals.
    pub huber_delta: f64,
    /// Diagonal element of the point-to-plane covariance `P_L`.
    pub point_variance: f64,
    /// Scalar weight of the logical-consistency residual (identity × weight).
    pub logical_weight: f64,
    pub neighbor_count: usize,
    pub min_plane_neighbors: usize,
    /// Associations whose point-to-plane distance exceeds this are dropped (m).
    pub max_plane_distance: f64,
    /// A fitted plane is rejected if any neighbor lies farther than this
    /// from it (m).
    pub max_plane_spread: f64,
    /// Use the plane planarity as `ω_p`; otherwise `ω_p = 1`.
    pub planarity_weight: bool,
    pub undistort: UndistortMode,
    /// Re-undistort with the latest estimates every outer iteration; if
    /// false, undistortion happens once with the prediction.
    pub reundistort_each_iteration: bool,
    pub min_associations: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            mode: Mode::SemiElastic,
            max_outer_iterations: 5,
            max_inner_iterations: 10,
            tolerance: 1e-6,
            huber_delta: 0.1,
            point_variance: 0.001,
            logical_weight: 1.0,
            neighbor_count: 20,
            min_plane_neighbors: 5,
            max_plane_distance: 0.5,
            max_plane_spread: 0.1,
            planarity_weight: true,
            undistort: UndistortMode::Uniform,
            reundistort_each_iteration: true,
            min_associations: 10,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("logical residual needs equal timestamps, got {0:.9} and {1:.9}")]
    TimestampMismatch(f64, f64),
    #[error("only {found} plane associations (need {needed})")]
    DegenerateGeometry {
        found: usize,
        needed: usize,
        /// Prediction-only estimate flagged as a fallback.
        fallback: Box<SweepEstimate>,
    },
    #[error("linear system could not be solved")]
    Numerical,
    #[error(transparent)]
    Imu(#[from] ImuError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CostBreakdown {
    pub point: f64,
    pub imu: f64,
    pub logical: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.point + self.imu + self.logical
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepEstimate {
    pub x_b: NavState,
    pub x_e: NavState,
    pub mode: Mode,
    pub outer_iterations: usize,
    /// Total accepted solver steps.
    pub iterations: usize,
    pub cost: f64,
    pub breakdown: CostBreakdown,
    pub converged: bool,
    /// True when optimization was skipped and the prediction returned.
    pub fallback: bool,
    pub associations: usize,
    /// Accepted costs per outer iteration, starting with the initial cost.
    pub cost_history: Vec<Vec<f64>>,
}

/// Predicted begin and end states of the next sweep: the begin state is the
/// previous end state; the end state is propagated through `imu` (which must
/// start at the previous end time) with the previous biases.
pub fn predict(
    prev_end: &NavState,
    imu: &[ImuSample],
    gravity: &Vec3,
) -> Result<(NavState, NavState), ImuError> {
    let coverage = || ImuError::Coverage {
        start: prev_end.timestamp,
        end: imu.last().map_or(prev_end.timestamp, |s| s.timestamp),
    };
    match imu.first() {
        Some(s) if imu.len() >= 2 && (s.timestamp - prev_end.timestamp).abs() <= 1e-9 => {}
        _ => return Err(coverage()),
    }
    let end = *propagate_window(prev_end, imu, gravity)
        .last()
        .expect("non-empty window");
    Ok((*prev_end, end))
}

/// Point-to-plane residual of a point expressed in the end-of-sweep IMU
/// frame. Returns the residual and its Jacobian with respect to (δt_e, δθ_e).
pub fn point_residual(p_end: &Vec3, plane: &PlaneFit, x_e: &NavState, weight: f64) -> (f64, Row6) {
    let p_w = x_e.rotation.rotate(p_end) + x_e.translation;
    let r = weight * plane.signed_distance(&p_w);
    let n = plane.normal.transpose() * weight;
    let mut j = Row6::zeros();
    j.fixed_view_mut::<1, 3>(0, 0).copy_from(&n);
    j.fixed_view_mut::<1, 3>(0, 3)
        .copy_from(&(-n * x_e.rotation.matrix() * skew(p_end)));
    (r, j)
}

/// Point-to-plane residual of a raw sensor-frame point captured at sweep
/// fraction `alpha`, projected with the LiDAR pose interpolated between x_b
/// and x_e. Jacobian columns are (δt_b, δθ_b, δt_e, δθ_e).
pub fn elastic_point_residual(
    p_lidar: &Vec3,
    alpha: f64,
    plane: &PlaneFit,
    x_b: &NavState,
    x_e: &NavState,
    extrinsic: &Pose,
    weight: f64,
) -> (f64, Row12) {
    let lb = x_b.pose().compose(extrinsic);
    let le = x_e.pose().compose(extrinsic);
    let phi = so3_log(&lb.rotation.inverse().compose(&le.rotation));
    let aphi = phi * alpha;
    let r_alpha = lb.rotation.compose(&so3_exp(&aphi));
    let t_alpha = lb.translation * (1.0 - alpha) + le.translation * alpha;
    let p_w = r_alpha.rotate(p_lidar) + t_alpha;
    let r = weight * plane.signed_distance(&p_w);

    let n = plane.normal.transpose() * weight;
    let dp_deps = -r_alpha.matrix() * skew(p_lidar);
    let coupling = right_jacobian(&aphi) * right_jacobian_inv(&phi) * alpha;
    let r_ol_t = extrinsic.rotation.matrix().transpose();
    let a_b = so3_exp(&aphi).matrix().transpose() - coupling * so3_exp(&phi).matrix().transpose();
    let t_skew = skew(&extrinsic.translation);
    let d_th_b = dp_deps * a_b * r_ol_t - x_b.rotation.matrix() * t_skew * (1.0 - alpha);
    let d_th_e = dp_deps * coupling * r_ol_t - x_e.rotation.matrix() * t_skew * alpha;

    let mut j = Row12::zeros();
    j.fixed_view_mut::<1, 3>(0, 0)
        .copy_from(&(n * (1.0 - alpha)));
    j.fixed_view_mut::<1, 3>(0, 3).copy_from(&(n * d_th_b));
    j.fixed_view_mut::<1, 3>(0, 6).copy_from(&(n * alpha));
    j.fixed_view_mut::<1, 3>(0, 9).copy_from(&(n * d_th_e));
    (r, j)
}

/// Logical-consistency residual tying x_b to the (constant) previous end
/// state, with its Jacobian with respect to the error state of x_b.
pub fn logical_residual(
    x_b: &NavState,
    prev_end: &NavState,
) -> Result<(Vector15, Matrix15), EstimatorError> {
    if (x_b.timestamp - prev_end.timestamp).abs() > 1e-9 {
        return Err(EstimatorError::TimestampMismatch(
            x_b.timestamp,
            prev_end.timestamp,
        ));
    }
    Ok(logical_unchecked(x_b, prev_end))
}

fn logical_unchecked(x_b: &NavState, prev_end: &NavState) -> (Vector15, Matrix15) {
    let q = prev_end.rotation.inverse().compose(&x_b.rotation);
    let mut r = Vector15::zeros();
    r.fixed_rows_mut::<3>(0)
        .copy_from(&(x_b.translation - prev_end.translation));
    r.fixed_rows_mut::<3>(3).copy_from(&(q.xyz() * 2.0));
    r.fixed_rows_mut::<3>(6)
        .copy_from(&(x_b.velocity - prev_end.velocity));
    r.fixed_rows_mut::<3>(9)
        .copy_from(&(x_b.bias_acc - prev_end.bias_acc));
    r.fixed_rows_mut::<3>(12)
        .copy_from(&(x_b.bias_gyro - prev_end.bias_gyro));
    let mut j = Matrix15::identity();
    j.fixed_view_mut::<3, 3>(IDX_R, IDX_R)
        .copy_from(&quat_left_block(&q));
    (r, j)
}

/// Everything the optimizer needs for one sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepInput<'a> {
    /// Down-sampled sensor-frame points.
    pub sweep: &'a Sweep,
    /// IMU samples covering the sweep (used by IMU undistortion).
    pub imu: &'a [ImuSample],
    pub preintegration: &'a Preintegration,
    pub prev_end: NavState,
    pub prediction: (NavState, NavState),
    pub gravity: Vec3,
    pub extrinsic: Pose,
}

#[derive(Debug, Clone, Copy)]
struct Association {
    /// End-frame point (rigid modes) or raw sensor point (elastic).
    point: Vec3,
    alpha: f64,
    plane: PlaneFit,
    weight: f64,
}

struct Problem<'a> {
    input: &'a SweepInput<'a>,
    cfg: &'a EstimatorConfig,
    assoc: Vec<Association>,
    imu_sqrt_info: Matrix15,
}

impl Problem<'_> {
    fn huber(&self, e2: f64) -> (f64, f64) {
        let d = self.cfg.huber_delta;
        if e2 <= d * d {
            (e2, 1.0)
        } else {
            let e = e2.sqrt();
            (2.0 * d * e - d * d, d / e)
        }
    }

    fn point_value(&self, a: &Association, x_b: &NavState, x_e: &NavState) -> f64 {
        match self.cfg.mode {
            Mode::Elastic => {
                elastic_point_residual(
                    &a.point,
                    a.alpha,
                    &a.plane,
                    x_b,
                    x_e,
                    &self.input.extrinsic,
                    a.weight,
                )
                .0
            }
            _ => point_residual(&a.point, &a.plane, x_e, a.weight).0,
        }
    }

    fn uses_logical(&self) -> bool {
        self.cfg.mode != Mode::Traditional
    }

    fn cost(&self, x_b: &NavState, x_e: &NavState) -> CostBreakdown {
        let inv_var = 1.0 / self.cfg.point_variance;
        let point = self
            .assoc
            .iter()
            .map(|a| {
                self.huber(self.point_value(a, x_b, x_e).powi(2) * inv_var)
                    .0
            })
            .sum();
        let r = residual_unchecked(self.input.preintegration, x_b, x_e, &self.input.gravity);
        let imu = (self.imu_sqrt_info * r).norm_squared();
        let logical = if self.uses_logical() {
            self.cfg.logical_weight
                * logical_unchecked(x_b, &self.input.prev_end)
                    .0
                    .norm_squared()
        } else {
            0.0
        };
        CostBreakdown {
            point,
            imu,
            logical,
        }
    }

    /// Gauss-Newton system `H δ = -g` over the 30-dim error state.
    fn normal_equations(&self, x_b: &NavState, x_e: &NavState) -> (Matrix30, Vector30) {
        let mut h = Matrix30::zeros();
        let mut g = Vector30::zeros();
        let inv_var = 1.0 / self.cfg.point_variance;

        for a in &self.assoc {
            match self.cfg.mode {
                Mode::Elastic => {
                    let (r, j) = elastic_point_residual(
                        &a.point,
                        a.alpha,
                        &a.plane,
                        x_b,
                        x_e,
                        &self.input.extrinsic,
                        a.weight,
                    );
                    let w = self.huber(r * r * inv_var).1 * inv_var;
                    let jt_j = j.transpose() * j * w;
                    let jt_r = j.transpose() * (r * w);
                    // columns: t_b, θ_b, t_e, θ_e
                    let idx = [IDX_T, IDX_R, E + IDX_T, E + IDX_R];
                    for (bi, &ri) in idx.iter().enumerate() {
                        let mut gd = g.fixed_rows_mut::<3>(ri);
                        gd += jt_r.fixed_rows::<3>(3 * bi);
                        for (bj, &cj) in idx.iter().enumerate() {
                            let blk = jt_j.fixed_view::<3, 3>(3 * bi, 3 * bj);
                            let mut dst = h.fixed_view_mut::<3, 3>(ri, cj);
                            dst += blk;
                        }
                    }
                }
                _ => {
                    let (r, j) = point_residual(&a.point, &a.plane, x_e, a.weight);
                    let w = self.huber(r * r * inv_var).1 * inv_var;
                    let mut dst = h.fixed_view_mut::<6, 6>(E, E);
                    dst += j.transpose() * j * w;
                    let mut gd = g.fixed_rows_mut::<6>(E);
                    gd += j.transpose() * (r * w);
                }
            }
        }

        let pre = self.input.preintegration;
        let r = residual_unchecked(pre, x_b, x_e, &self.input.gravity);
        let j = residual_jacobian(pre, x_b, x_e, &self.input.gravity);
        let jw = self.imu_sqrt_info * j;
        let rw = self.imu_sqrt_info * r;
        h += jw.transpose() * jw;
        g += jw.transpose() * rw;

        if self.uses_logical() {
            let (r, j) = logical_unchecked(x_b, &self.input.prev_end);
            let w = self.cfg.logical_weight;
            let mut hb = h.fixed_view_mut::<15, 15>(0, 0);
            hb += j.transpose() * j * w;
            let mut gb = g.fixed_rows_mut::<15>(0);
            gb += j.transpose() * r * w;
        }
        (h, g)
    }

    fn active(&self) -> std::ops::Range<usize> {
        match self.cfg.mode {
            Mode::Traditional => E..2 * E,
            _ => 0..2 * E,
        }
    }

    /// Solves the damped system over the active block; returns the full
    /// 30-dim step (zeros in frozen dims).
    fn damped_step(&self, h: &Matrix30, g: &Vector30, lambda: f64) -> Option<Vector30> {
        let range = self.active();
        let n = range.len();
        let off = range.start;
        let mut a = DMatrix::from_fn(n, n, |i, j| h[(off + i, off + j)]);
        for i in 0..n {
            a[(i, i)] += lambda * a[(i, i)].max(1e-9);
        }
        let b = DVector::from_fn(n, |i, _| -g[off + i]);
        let sol = a.cholesky()?.solve(&b);
        if !sol.iter().all(|v| v.is_finite()) {
            return None;
        }
        let mut step = Vector30::zeros();
        for i in 0..n {
            step[off + i] = sol[i];
        }
        Some(step)
    }
}

fn apply(x_b: &NavState, x_e: &NavState, step: &Vector30, mode: Mode) -> (NavState, NavState) {
    let db: Vector15 = step.fixed_rows::<15>(0).into_owned();
    let de: Vector15 = step.fixed_rows::<15>(E).into_owned();
    let nb = if mode == Mode::Traditional {
        *x_b
    } else {
        x_b.boxplus(&db)
    };
    (nb, x_e.boxplus(&de))
}

/// Points of the sweep expressed in the end-of-sweep IMU frame under the
/// current estimates.
pub fn undistort_with(
    input: &SweepInput,
    variant: UndistortMode,
    x_b: &NavState,
    x_e: &NavState,
) -> Result<Vec<TimedPoint>, EstimatorError> {
    Ok(match variant {
        UndistortMode::Uniform => undistort_uniform(input.sweep, x_b, x_e, &input.extrinsic)?,
        UndistortMode::Imu => undistort_imu(
            input.sweep,
            input.imu,
            x_b,
            &input.extrinsic,
            &input.gravity,
        )?,
    })
}

fn associate(
    points: &[(Vec3, f64)],
    map: &VoxelMap,
    cfg: &EstimatorConfig,
    to_world: impl Fn(&Vec3, f64) -> Vec3 + Sync,
) -> Vec<Association> {
    points
        .par_iter()
        .map(|&(p, alpha)| {
            let pw = to_world(&p, alpha);
            let nbrs = map.neighbors(&pw, cfg.neighbor_count);
            if nbrs.len() < cfg.min_plane_neighbors {
                return None;
            }
            let plane = fit_plane_min(&nbrs, cfg.min_plane_neighbors).ok()?;
            if nbrs
                .iter()
                .any(|q| plane.signed_distance(q).abs() > cfg.max_plane_spread)
            {
                return None;
            }
            if plane.signed_distance(&pw).abs() > cfg.max_plane_distance {
                return None;
            }
            let weight = if cfg.planarity_weight {
                plane.planarity
            } else {
                1.0
            };
            (weight > 0.0).then_some(Association {
                point: p,
                alpha,
                plane,
                weight,
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

fn fallback_estimate(input: &SweepInput, cfg: &EstimatorConfig, found: usize) -> EstimatorError {
    let (x_b, x_e) = input.prediction;
    EstimatorError::DegenerateGeometry {
        found,
        needed: cfg.min_associations,
        fallback: Box::new(SweepEstimate {
            x_b,
            x_e,
            mode: cfg.mode,
            outer_iterations: 0,
            iterations: 0,
            cost: f64::NAN,
            breakdown: CostBreakdown::default(),
            converged: false,
            fallback: true,
            associations: found,
            cost_history: Vec::new(),
        }),
    }
}

/// Optimizes the begin/end states of one sweep against the map.
pub fn optimize(
    input: &SweepInput,
    map: &VoxelMap,
    cfg: &EstimatorConfig,
) -> Result<SweepEstimate, EstimatorError> {
    let (mut x_b, mut x_e) = input.prediction;
    if cfg.mode == Mode::Traditional {
        x_b = input.prev_end;
    }
    let imu_sqrt_info = input.preintegration.sqrt_information();

    let mut history = Vec::new();
    let mut iterations = 0;
    let mut outer = 0;
    let mut converged = false;
    let mut last_assoc = 0;
    let mut breakdown = CostBreakdown::default();
    let mut rigid_points: Vec<(Vec3, f64)> = Vec::new();

    while outer < cfg.max_outer_iterations {
        outer += 1;
        let assoc = match cfg.mode {
            Mode::Elastic => {
                let raw: Vec<_> = input
                    .sweep
                    .points
                    .iter()
                    .map(|p| (p.position, input.sweep.alpha(p.timestamp)))
                    .collect();
                let (lb, le) = (
                    x_b.pose().compose(&input.extrinsic),
                    x_e.pose().compose(&input.extrinsic),
                );
                associate(&raw, map, cfg, |p, a| {
                    crate::geometry::interpolate_pose_unchecked(&lb, &le, a).transform_point(p)
                })
            }
            _ => {
                if outer == 1 || cfg.reundistort_each_iteration {
                    rigid_points = undistort_with(input, cfg.undistort, &x_b, &x_e)?
                        .into_iter()
                        .map(|p| (p.position, 1.0))
                        .collect();
                }
                let pose = x_e.pose();
                associate(&rigid_points, map, cfg, |p, _| pose.transform_point(p))
            }
        };
        last_assoc = assoc.len();
        if assoc.len() < cfg.min_associations {
            return Err(fallback_estimate(input, cfg, assoc.len()));
        }
        let problem = Problem {
            input,
            cfg,
            assoc,
            imu_sqrt_info,
        };

        let mut cost = problem.cost(&x_b, &x_e).total();
        let mut costs = vec![cost];
        let mut lambda = 1e-6;
        let mut outer_converged = false;
        for inner in 0..cfg.max_inner_iterations {
            let (h, g) = problem.normal_equations(&x_b, &x_e);
            let mut accepted = None;
            for _ in 0..12 {
                let Some(step) = problem.damped_step(&h, &g, lambda) else {
                    lambda *= 10.0;
                    continue;
                };
                let (nb, ne) = apply(&x_b, &x_e, &step, cfg.mode);
                let c = problem.cost(&nb, &ne).total();
                if c <= cost {
                    accepted = Some((nb, ne, c, step.norm()));
                    lambda = (lambda / 3.0).max(1e-12);
                    break;
                }
                lambda *= 4.0;
            }
            let Some((nb, ne, c, step_norm)) = accepted else {
                // no descent direction left: at a (local) minimum
                outer_converged = inner == 0;
                break;
            };
            x_b = nb;
            x_e = ne;
            cost = c;
            costs.push(c);
            iterations += 1;
            if step_norm < cfg.tolerance {
                outer_converged = inner == 0;
                break;
            }
        }
        history.push(costs);
        breakdown = problem.cost(&x_b, &x_e);
        if outer_converged {
            converged = true;
            break;
        }
    }

    Ok(SweepEstimate {
        x_b,
        x_e,
        mode: cfg.mode,
        outer_iterations: outer,
        iterations,
        cost: breakdown.total(),
        breakdown,
        converged,
        fallback: false,
        associations: last_assoc,
        cost_history: history,
    })
}
