//! Sparse voxel grid with per-cell mean, covariance, normal and color.
//!
//! Cell statistics are accumulated in a single streaming pass (Welford's update
//! with Chan's pairwise merge), so the same accumulator serves batch
//! voxelization and incremental map building.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::cloud::{check_finite, Point3, PointCloud, Rgb};
use crate::error::{Error, Result};

/// Minimum point count for a defined covariance.
pub const MIN_POINTS_FOR_COVARIANCE: usize = 3;

/// Normals are undefined when the two smallest eigenvalues are closer than this.
pub const EIGEN_GAP_EPS: f64 = 1e-12;

/// Integer cell coordinates, `floor(coordinate / voxel_size)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VoxelKey {
    pub ix: i64,
    pub iy: i64,
    pub iz: i64,
}

impl VoxelKey {
    pub fn new(ix: i64, iy: i64, iz: i64) -> Self {
        Self { ix, iy, iz }
    }

    pub fn of(p: &Point3, voxel_size: f64) -> Self {
        Self {
            ix: (p.x / voxel_size).floor() as i64,
            iy: (p.y / voxel_size).floor() as i64,
            iz: (p.z / voxel_size).floor() as i64,
        }
    }

    /// Geometric center of the cell.
    pub fn center(&self, voxel_size: f64) -> Point3 {
        Vector3::new(
            self.ix as f64 * voxel_size + voxel_size / 2.0,
            self.iy as f64 * voxel_size + voxel_size / 2.0,
            self.iz as f64 * voxel_size + voxel_size / 2.0,
        )
    }
}

/// Statistics of the points falling in one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelCell {
    pub count: usize,
    pub mean: Point3,
    /// Sample covariance (1/(n-1) normalization); present for `count >= 3`.
    pub covariance: Option<Matrix3<f64>>,
    pub normal: Option<Vector3<f64>>,
    pub color: Option<Rgb>,
}

/// Streaming accumulator for [`VoxelCell`] statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct CellAccumulator {
    count: usize,
    mean: Point3,
    /// Sum of outer products of deviations from the running mean.
    scatter: Matrix3<f64>,
    color_sum: [u64; 3],
    color_count: usize,
}

impl Default for CellAccumulator {
    fn default() -> Self {
        Self {
            count: 0,
            mean: Vector3::zeros(),
            scatter: Matrix3::zeros(),
            color_sum: [0; 3],
            color_count: 0,
        }
    }
}

impl CellAccumulator {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &Point3 {
        &self.mean
    }

    pub fn push(&mut self, p: &Point3, color: Option<Rgb>) {
        self.count += 1;
        let delta = p - self.mean;
        self.mean += delta / self.count as f64;
        self.scatter += delta * (p - self.mean).transpose();
        if let Some(rgb) = color {
            for (sum, &c) in self.color_sum.iter_mut().zip(&rgb) {
                *sum += c as u64;
            }
            self.color_count += 1;
        }
    }

    pub fn merge(&mut self, other: &CellAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = other.mean - self.mean;
        self.mean += delta * (nb / n);
        self.scatter += other.scatter + delta * delta.transpose() * (na * nb / n);
        self.count += other.count;
        for (a, b) in self.color_sum.iter_mut().zip(&other.color_sum) {
            *a += b;
        }
        self.color_count += other.color_count;
    }

    /// Finalizes into a cell. The normal is left unset.
    pub fn to_cell(&self) -> VoxelCell {
        let covariance = (self.count >= MIN_POINTS_FOR_COVARIANCE).then(|| {
            let c = self.scatter / (self.count as f64 - 1.0);
            (c + c.transpose()) * 0.5
        });
        let color = (self.color_count > 0 && self.color_count == self.count).then(|| {
            let n = self.color_count as f64;
            self.color_sum.map(|s| (s as f64 / n).round() as u8)
        });
        VoxelCell {
            count: self.count,
            mean: self.mean,
            covariance,
            normal: None,
            color,
        }
    }
}

/// Mean, covariance and mean color of a point set. The normal is not estimated.
pub fn cell_statistics(points: &[Point3], colors: Option<&[Rgb]>) -> Result<VoxelCell> {
    if points.is_empty() {
        return Err(Error::argument("cell statistics need at least one point"));
    }
    if let Some(c) = colors {
        if c.len() != points.len() {
            return Err(Error::argument("colors and points differ in length"));
        }
    }
    let mut acc = CellAccumulator::default();
    for (i, p) in points.iter().enumerate() {
        acc.push(p, colors.map(|c| c[i]));
    }
    Ok(acc.to_cell())
}

/// Unit normal of the cell's covariance: the eigenvector of the smallest
/// eigenvalue. Oriented toward `viewpoint` when given, otherwise into the
/// `z >= 0` hemisphere (ties resolved by `y >= 0`, then `x >= 0`). Returns
/// `None` when the two smallest eigenvalues are too close to pick a direction.
pub fn estimate_normal(cell: &VoxelCell, viewpoint: Option<&Point3>) -> Result<Option<Vector3<f64>>> {
    let covariance = cell
        .covariance
        .ok_or_else(|| Error::argument("normal requested for a cell without covariance"))?;
    Ok(normal_from_covariance(&covariance, &cell.mean, viewpoint))
}

/// Exactly-zero tolerance for the hemisphere tie rules.
const HEMISPHERE_TIE_EPS: f64 = 1e-12;

pub(crate) fn normal_from_covariance(
    covariance: &Matrix3<f64>,
    mean: &Point3,
    viewpoint: Option<&Point3>,
) -> Option<Vector3<f64>> {
    if !covariance.iter().all(|v| v.is_finite()) {
        return None;
    }
    let eig = SymmetricEigen::new(*covariance);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l0, l1) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if l1 - l0 < EIGEN_GAP_EPS {
        return None;
    }
    let mut n: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
    n.normalize_mut();
    let flip = match viewpoint {
        Some(v) => n.dot(&(v - mean)) < 0.0,
        None => {
            if n.z.abs() > HEMISPHERE_TIE_EPS {
                n.z < 0.0
            } else if n.y.abs() > HEMISPHERE_TIE_EPS {
                n.y < 0.0
            } else {
                n.x < 0.0
            }
        }
    };
    if flip {
        n = -n;
    }
    Some(n)
}

/// Sparse grid keyed by [`VoxelKey`], iterated in key order.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub voxel_size: f64,
    pub cells: BTreeMap<VoxelKey, VoxelCell>,
}

impl VoxelGrid {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn total_count(&self) -> usize {
        self.cells.values().map(|c| c.count).sum()
    }

    /// Means and normals of the cells that have a normal, in key order.
    pub fn oriented_means(&self) -> (Vec<Point3>, Vec<Vector3<f64>>) {
        self.cells
            .values()
            .filter_map(|c| c.normal.map(|n| (c.mean, n)))
            .unzip()
    }
}

/// Points per parallel work unit; fixed so results do not depend on thread count.
const CHUNK: usize = 1 << 14;

/// Bins `cloud` into cubic cells of edge `voxel_size` and computes every
/// cell's statistics and normal.
pub fn voxelize(cloud: &PointCloud, voxel_size: f64) -> Result<VoxelGrid> {
    if !(voxel_size.is_finite() && voxel_size > 0.0) {
        return Err(Error::argument(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    check_finite(&cloud.points)?;
    let colors = cloud.colors.as_deref();

    let keys: Vec<VoxelKey> = cloud
        .points
        .par_iter()
        .map(|p| VoxelKey::of(p, voxel_size))
        .collect();
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.par_sort_by_key(|&i| (keys[i], i));

    // Group boundaries of runs sharing a key.
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=order.len() {
        if i == order.len() || keys[order[i]] != keys[order[start]] {
            groups.push((start, i));
            start = i;
        }
    }

    let cells: Vec<(VoxelKey, VoxelCell)> = groups
        .par_chunks(CHUNK)
        .flat_map_iter(|chunk| {
            chunk.iter().map(|&(s, e)| {
                let mut acc = CellAccumulator::default();
                for &i in &order[s..e] {
                    acc.push(&cloud.points[i], colors.map(|c| c[i]));
                }
                let mut cell = acc.to_cell();
                cell.normal = cell
                    .covariance
                    .and_then(|c| normal_from_covariance(&c, &cell.mean, None));
                (keys[order[s]], cell)
            })
        })
        .collect();

    Ok(VoxelGrid {
        voxel_size,
        cells: cells.into_iter().collect(),
    })
}

/// One point per occupied cell, at the cell mean, in key order.
pub fn downsample(grid: &VoxelGrid) -> PointCloud {
    let points = grid.cells.values().map(|c| c.mean).collect();
    let colors = grid
        .cells
        .values()
        .map(|c| c.color)
        .collect::<Option<Vec<Rgb>>>()
        .filter(|c| !c.is_empty());
    PointCloud {
        points,
        colors,
        labels: None,
    }
}
