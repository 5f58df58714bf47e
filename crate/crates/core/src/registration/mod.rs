//! Rigid registration: closed-form fitting, FPFH-matched RANSAC for coarse
//! alignment and point-to-plane ICP for refinement.

mod icp;
mod ransac;
mod rigid;

use rayon::prelude::*;

use crate::cloud::{Point3, RigidTransform};
use crate::spatial::SpatialIndex;

pub use icp::{icp_point_to_plane, icp_point_to_plane_with_target, IcpParams, PlaneTarget};
pub(crate) use icp::solve_locked;
pub use ransac::{match_fpfh, ransac_coarse, Correspondence, RansacParams};
pub use rigid::estimate_rigid;

/// Outcome of a registration stage.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    /// Fraction of source points with a correspondence, in [0, 1].
    pub fitness: f64,
    pub inlier_rmse: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Residual RMSE at the start of each ICP iteration.
    pub rmse_history: Vec<f64>,
}

/// Fitness and inlier RMSE of `source` mapped by `transform` against the
/// indexed target: inliers are points whose nearest target lies within
/// `threshold` (inclusive).
pub fn evaluate_alignment(
    source: &[Point3],
    target_index: &SpatialIndex,
    transform: &RigidTransform,
    threshold: f64,
) -> (f64, f64) {
    if source.is_empty() {
        return (0.0, 0.0);
    }
    let distances: Vec<Option<f64>> = source
        .par_iter()
        .map(|p| {
            target_index
                .nearest_point_within(&transform.apply(p), threshold)
                .map(|n| n.distance)
        })
        .collect();
    let (mut count, mut sum_sq) = (0usize, 0.0);
    for d in distances.into_iter().flatten() {
        count += 1;
        sum_sq += d * d;
    }
    if count == 0 {
        return (0.0, 0.0);
    }
    (
        count as f64 / source.len() as f64,
        (sum_sq / count as f64).sqrt(),
    )
}
