use nalgebra::{Matrix6, SymmetricEigen, Vector3, Vector6};
use rayon::prelude::*;

use super::RegistrationResult;
use crate::cloud::{Point3, PointCloud, RigidTransform};
use crate::error::{Error, Result};
use crate::io::PipelineConfig;
use crate::spatial::{build_index, SpatialIndex};
use crate::voxel::VoxelGrid;

/// Fewest correspondences that can pin down a 6-DoF update.
pub const MIN_CORRESPONDENCES: usize = 6;

/// Eigen-directions of the normal equations weaker than this fraction of the
/// strongest are treated as unobservable and receive no update.
const LOCK_RATIO: f64 = 1e-12;

/// Cell edge (meters) of the source ordering used for query locality.
const SORT_CELL: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpParams {
    pub max_correspondence_distance: f64,
    pub max_iterations: usize,
    pub convergence_eps: f64,
}

impl From<&PipelineConfig> for IcpParams {
    fn from(c: &PipelineConfig) -> Self {
        Self {
            max_correspondence_distance: c.icp_max_correspondence_distance,
            max_iterations: c.icp_max_iterations,
            convergence_eps: c.icp_convergence_eps,
        }
    }
}

/// Oriented cell means of a voxel grid, indexed for correspondence search.
#[derive(Debug, Clone)]
pub struct PlaneTarget {
    index: SpatialIndex,
    means: Vec<Point3>,
    normals: Vec<Vector3<f64>>,
}

impl PlaneTarget {
    /// Target from explicit surface points and unit normals.
    pub fn new(means: Vec<Point3>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        if means.len() != normals.len() {
            return Err(Error::argument("means and normals differ in length"));
        }
        if means.is_empty() {
            return Err(Error::argument("target has no oriented points"));
        }
        if let Some(i) = normals.iter().position(|n| !((n.norm() - 1.0).abs() <= 1e-6)) {
            return Err(Error::Data {
                index: i,
                message: "normal is not unit length".into(),
            });
        }
        Ok(Self {
            index: build_index(&means)?,
            means,
            normals,
        })
    }

    pub fn from_grid(grid: &VoxelGrid) -> Result<Self> {
        let (means, normals) = grid.oriented_means();
        if means.is_empty() {
            return Err(Error::argument("target grid has no cells with normals"));
        }
        Self::new(means, normals)
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// Solves `H x = -g` on the observable subspace of `H` (symmetric PSD).
/// Directions with eigenvalue below `LOCK_RATIO * max` are held fixed.
pub(crate) fn solve_locked(h: &Matrix6<f64>, g: &Vector6<f64>) -> Result<Vector6<f64>> {
    if !h.iter().chain(g.iter()).all(|v| v.is_finite()) {
        return Err(Error::DegenerateGeometry(
            "non-finite normal equations".into(),
        ));
    }
    let eig = SymmetricEigen::new(*h);
    let max = eig.eigenvalues.max();
    if !(max > 0.0) {
        return Err(Error::DegenerateGeometry(
            "normal equations carry no information".into(),
        ));
    }
    let mut x = Vector6::zeros();
    for k in 0..6 {
        let lambda = eig.eigenvalues[k];
        if lambda > LOCK_RATIO * max {
            let v = eig.eigenvectors.column(k);
            x -= v * (v.dot(g) / lambda);
        }
    }
    Ok(x)
}

struct Pair {
    residual: f64,
    jacobian: Vector6<f64>,
}

fn correspondences(
    source: &[Point3],
    target: &PlaneTarget,
    transform: &RigidTransform,
    max_distance: f64,
) -> Vec<Pair> {
    let pairs: Vec<Option<Pair>> = source
        .par_iter()
        .map(|p| {
            let moved = transform.apply(p);
            target
                .index
                .nearest_point_within(&moved, max_distance)
                .map(|hit| {
                    let n = target.normals[hit.index];
                    let q = target.means[hit.index];
                    let mut jacobian = Vector6::zeros();
                    jacobian
                        .fixed_rows_mut::<3>(0)
                        .copy_from(&moved.cross(&n));
                    jacobian.fixed_rows_mut::<3>(3).copy_from(&n);
                    Pair {
                        residual: (moved - q).dot(&n),
                        jacobian,
                    }
                })
        })
        .collect();
    pairs.into_iter().flatten().collect()
}

fn rmse(pairs: &[Pair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    (pairs.iter().map(|p| p.residual * p.residual).sum::<f64>() / pairs.len() as f64).sqrt()
}

/// Point-to-plane ICP of `source` against the oriented cells of `target_grid`.
pub fn icp_point_to_plane(
    source: &PointCloud,
    target_grid: &VoxelGrid,
    init: &RigidTransform,
    config: &PipelineConfig,
) -> Result<RegistrationResult> {
    let target = PlaneTarget::from_grid(target_grid)?;
    icp_point_to_plane_with_target(&source.points, &target, init, &IcpParams::from(config))
}

/// Point-to-plane ICP against a prebuilt [`PlaneTarget`].
///
/// Each iteration matches every transformed source point to the nearest
/// oriented cell mean within the correspondence distance, linearizes
/// `((R p + t - q) · n)^2` around the current pose with `R ≈ I + [ω]×`,
/// solves the 6x6 normal equations for `(ω, δ)` and left-composes the
/// exponential of the increment. Stops when `|(ω, δ)|` falls below the
/// convergence threshold.
pub fn icp_point_to_plane_with_target(
    source: &[Point3],
    target: &PlaneTarget,
    init: &RigidTransform,
    params: &IcpParams,
) -> Result<RegistrationResult> {
    if !init.is_valid(1e-6) {
        return Err(Error::argument("initial transform is not a proper rigid motion"));
    }
    // Neighboring queries share most of their tree path; visiting the source
    // cell by cell keeps that path in cache.
    let mut sorted = source.to_vec();
    sorted.sort_by_key(|p| {
        (
            (p.x / SORT_CELL).floor() as i64,
            (p.y / SORT_CELL).floor() as i64,
            (p.z / SORT_CELL).floor() as i64,
        )
    });
    let source = &sorted[..];
    let max_distance = params.max_correspondence_distance;
    let matched = |t: &RigidTransform| -> Result<Vec<Pair>> {
        let pairs = correspondences(source, target, t, max_distance);
        if pairs.len() < MIN_CORRESPONDENCES {
            return Err(Error::InsufficientOverlap {
                found: pairs.len(),
                required: MIN_CORRESPONDENCES,
            });
        }
        Ok(pairs)
    };

    let mut transform = *init;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < params.max_iterations {
        iterations += 1;
        let pairs = matched(&transform)?;
        history.push(rmse(&pairs));

        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for pair in &pairs {
            h += pair.jacobian * pair.jacobian.transpose();
            g += pair.jacobian * pair.residual;
        }
        let step = solve_locked(&h, &g)?;
        let increment = RigidTransform::from_rotation_vector(
            step.fixed_rows::<3>(0).into_owned(),
            step.fixed_rows::<3>(3).into_owned(),
        );
        transform = increment.compose(&transform);
        if step.norm() < params.convergence_eps {
            converged = true;
            break;
        }
    }

    let pairs = correspondences(source, target, &transform, max_distance);
    let fitness = if source.is_empty() {
        0.0
    } else {
        pairs.len() as f64 / source.len() as f64
    };
    Ok(RegistrationResult {
        transform,
        fitness,
        inlier_rmse: rmse(&pairs),
        iterations,
        converged,
        rmse_history: history,
    })
}
