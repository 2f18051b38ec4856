//! World-frame point map on a hashed voxel grid with bounded voxels.

use rustc_hash::FxHashMap;
use std::io::{self, Write};

use nalgebra::SymmetricEigen;
use thiserror::Error;

use crate::geometry::{Mat3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey {
    pub ix: i64,
    pub iy: i64,
    pub iz: i64,
}

impl VoxelKey {
    pub fn of(p: &Vec3, voxel_size: f64) -> Self {
        Self {
            ix: (p.x / voxel_size).floor() as i64,
            iy: (p.y / voxel_size).floor() as i64,
            iz: (p.z / voxel_size).floor() as i64,
        }
    }

    pub fn center(&self, voxel_size: f64) -> Vec3 {
        Vec3::new(
            (self.ix as f64 + 0.5) * voxel_size,
            (self.iy as f64 + 0.5) * voxel_size,
            (self.iz as f64 + 0.5) * voxel_size,
        )
    }

    fn offset(&self, dx: i64, dy: i64, dz: i64) -> Self {
        Self {
            ix: self.ix + dx,
            iy: self.iy + dy,
            iz: self.iz + dz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelMapConfig {
    pub voxel_size: f64,
    pub capacity: usize,
    /// Neighbor search visits the (2r+1)³ block of voxels around the query.
    pub search_radius: i64,
    /// A point closer than this to a point already in its voxel is rejected.
    /// Zero disables the check.
    pub min_point_distance: f64,
}

impl Default for VoxelMapConfig {
    fn default() -> Self {
        Self {
            voxel_size: 1.0,
            capacity: 20,
            search_radius: 1,
            min_point_distance: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InsertReport {
    pub added: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone)]
pub struct VoxelMap {
    config: VoxelMapConfig,
    voxels: FxHashMap<VoxelKey, Vec<Vec3>>,
}

impl VoxelMap {
    pub fn new(config: VoxelMapConfig) -> Self {
        Self {
            config,
            voxels: FxHashMap::default(),
        }
    }

    pub fn config(&self) -> &VoxelMapConfig {
        &self.config
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn num_voxels(&self) -> usize {
        self.voxels.len()
    }

    pub fn num_points(&self) -> usize {
        self.voxels.values().map(Vec::len).sum()
    }

    pub fn voxel(&self, key: &VoxelKey) -> Option<&[Vec3]> {
        self.voxels.get(key).map(Vec::as_slice)
    }

    pub fn voxels(&self) -> impl Iterator<Item = (&VoxelKey, &[Vec3])> {
        self.voxels.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// Appends each point to its voxel; points landing in a full voxel, or
    /// within `min_point_distance` of a stored point, are rejected.
    pub fn insert<'a>(&mut self, points: impl IntoIterator<Item = &'a Vec3>) -> InsertReport {
        let mut report = InsertReport::default();
        for p in points {
            let cell = self
                .voxels
                .entry(VoxelKey::of(p, self.config.voxel_size))
                .or_insert_with(|| Vec::with_capacity(self.config.capacity));
            let d2 = self.config.min_point_distance * self.config.min_point_distance;
            let crowded = d2 > 0.0 && cell.iter().any(|q| (q - p).norm_squared() < d2);
            if cell.len() < self.config.capacity && !crowded {
                cell.push(*p);
                report.added += 1;
            } else {
                report.rejected += 1;
            }
        }
        report
    }

    /// Candidates from the search block around `query`, in deterministic order.
    pub fn candidates(&self, query: &Vec3) -> impl Iterator<Item = &Vec3> + '_ {
        let key = VoxelKey::of(query, self.config.voxel_size);
        let r = self.config.search_radius;
        (-r..=r)
            .flat_map(move |dx| (-r..=r).flat_map(move |dy| (-r..=r).map(move |dz| (dx, dy, dz))))
            .filter_map(move |(dx, dy, dz)| self.voxels.get(&key.offset(dx, dy, dz)))
            .flatten()
    }

    /// Up to `k` nearest stored points from the search block, nearest first.
    pub fn neighbors(&self, query: &Vec3, k: usize) -> Vec<Vec3> {
        if k == 0 {
            return Vec::new();
        }
        let size = self.config.voxel_size;
        let key = VoxelKey::of(query, size);
        let r = self.config.search_radius;
        // visit voxels nearest-first so whole voxels can be skipped once the
        // k best are known
        let mut cells: Vec<(f64, &Vec<Vec3>)> = Vec::with_capacity(((2 * r + 1).pow(3)) as usize);
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    let cell = key.offset(dx, dy, dz);
                    if let Some(points) = self.voxels.get(&cell) {
                        let lo = Vec3::new(cell.ix as f64, cell.iy as f64, cell.iz as f64) * size;
                        let gap = (lo - query)
                            .sup(&(query - lo - Vec3::repeat(size)))
                            .sup(&Vec3::zeros());
                        cells.push((gap.norm_squared(), points));
                    }
                }
            }
        }
        cells.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut best: Vec<(f64, Vec3)> = Vec::with_capacity(k + 1);
        for (gap, points) in cells {
            if best.len() == k && best.last().is_some_and(|w| gap > w.0) {
                break;
            }
            for p in points {
                let d = (p - query).norm_squared();
                if best.len() == k && best.last().is_some_and(|w| d >= w.0) {
                    continue;
                }
                let at = best.partition_point(|b| b.0 <= d);
                best.insert(at, (d, *p));
                best.truncate(k);
            }
        }
        best.into_iter().map(|(_, p)| p).collect()
    }

    /// Removes every voxel whose center is farther than `max_dist` from `center`.
    pub fn prune(&mut self, center: &Vec3, max_dist: f64) -> usize {
        let size = self.config.voxel_size;
        let before = self.voxels.len();
        self.voxels
            .retain(|k, _| (k.center(size) - center).norm() <= max_dist);
        before - self.voxels.len()
    }

    /// Writes every stored point as an `x y z` line, voxels in key order.
    pub fn dump<W: Write>(&self, mut out: W) -> io::Result<()> {
        let mut keys: Vec<_> = self.voxels.keys().collect();
        keys.sort();
        for k in keys {
            for p in &self.voxels[k] {
                writeln!(out, "{:.6} {:.6} {:.6}", p.x, p.y, p.z)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlaneFitError {
    #[error("need at least {needed} points for a plane fit, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("degenerate point spread (eigenvalues {0:e}, {1:e})")]
    Degenerate(f64, f64),
}

/// Local plane `nᵀx + d = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFit {
    pub normal: Vec3,
    pub offset: f64,
    /// (√λ2 − √λ1)/√λ3 of the scatter spectrum λ1 ≤ λ2 ≤ λ3.
    pub planarity: f64,
    pub centroid: Vec3,
    pub count: usize,
}

impl PlaneFit {
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) + self.offset
    }
}

pub const MIN_PLANE_POINTS: usize = 5;

/// Least-squares plane through `points`. The normal is the eigenvector of the
/// smallest scatter eigenvalue, with its largest-magnitude component positive.
pub fn fit_plane(points: &[Vec3]) -> Result<PlaneFit, PlaneFitError> {
    fit_plane_min(points, MIN_PLANE_POINTS)
}

pub fn fit_plane_min(points: &[Vec3], min_points: usize) -> Result<PlaneFit, PlaneFitError> {
    if points.len() < min_points.max(3) {
        return Err(PlaneFitError::TooFewPoints {
            needed: min_points.max(3),
            got: points.len(),
        });
    }
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vec3>() / n;
    let scatter = points.iter().fold(Mat3::zeros(), |acc, p| {
        let d = p - centroid;
        acc + d * d.transpose()
    }) / n;

    let eig = SymmetricEigen::new(scatter);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let lam = order.map(|i| eig.eigenvalues[i].max(0.0));
    if lam[1] - lam[0] <= 1e-12 {
        return Err(PlaneFitError::Degenerate(lam[0], lam[1]));
    }
    let mut normal: Vec3 = eig.eigenvectors.column(order[0]).normalize();
    let imax = normal.iamax();
    if normal[imax] < 0.0 {
        normal = -normal;
    }
    let planarity = if lam[2] > 0.0 {
        ((lam[1].sqrt() - lam[0].sqrt()) / lam[2].sqrt()).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(PlaneFit {
        normal,
        offset: -normal.dot(&centroid),
        planarity,
        centroid,
        count: points.len(),
    })
}
