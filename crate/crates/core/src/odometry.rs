//! Sequential scan-to-map odometry with constant-velocity prediction, an
//! adaptive correspondence threshold and Huber-weighted point-to-point ICP.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix6, Vector6};
use rayon::prelude::*;

use crate::cloud::{Point3, PointCloud, RigidTransform, Trajectory};
use crate::error::{Error, Result};
use crate::io::PipelineConfig;
use crate::registration::solve_locked;
use crate::spatial::{build_index, SpatialIndex};
use crate::voxel::{CellAccumulator, VoxelGrid, VoxelKey};

/// Fewest scan-to-map correspondences for a scan to be accepted.
pub const MIN_CORRESPONDENCES: usize = 6;

/// Fraction of the default threshold below which the adaptive threshold never falls.
const THRESHOLD_FLOOR: f64 = 0.1;

/// Running statistics of prediction errors (translation norms, meters).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DeviationStats {
    pub count: usize,
    pub sum_sq: f64,
}

impl DeviationStats {
    pub fn push(&mut self, deviation: f64) {
        self.count += 1;
        self.sum_sq += deviation * deviation;
    }
}

#[derive(Debug, Clone, Default)]
struct MapCell {
    points: Vec<Point3>,
    stats: CellAccumulator,
}

/// Accumulated map in the first scan's frame.
///
/// Every cell keeps running statistics over all inserted points and up to
/// `max_points_per_voxel` raw points, which serve as ICP targets.
#[derive(Debug, Clone)]
pub struct LocalMap {
    voxel_size: f64,
    max_points_per_voxel: usize,
    cells: BTreeMap<VoxelKey, MapCell>,
}

impl LocalMap {
    pub fn new(voxel_size: f64, max_points_per_voxel: usize) -> Self {
        Self {
            voxel_size,
            max_points_per_voxel,
            cells: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn insert(&mut self, points: &[Point3]) {
        for p in points {
            let cell = self.cells.entry(VoxelKey::of(p, self.voxel_size)).or_default();
            cell.stats.push(p, None);
            if cell.points.len() < self.max_points_per_voxel {
                cell.points.push(*p);
            }
        }
    }

    /// Drops cells whose center lies farther than `radius` from `origin`.
    pub fn evict(&mut self, origin: &Point3, radius: f64) {
        let size = self.voxel_size;
        self.cells
            .retain(|key, _| (key.center(size) - origin).norm() <= radius);
    }

    /// Stored target points in key order.
    pub fn points(&self) -> Vec<Point3> {
        self.cells
            .values()
            .flat_map(|c| c.points.iter().copied())
            .collect()
    }

    /// Cell statistics as a voxel grid (normals oriented by the z rule).
    pub fn to_grid(&self) -> VoxelGrid {
        let cells = self
            .cells
            .iter()
            .map(|(key, c)| {
                let mut cell = c.stats.to_cell();
                cell.normal = cell
                    .covariance
                    .and_then(|cov| crate::voxel::normal_from_covariance(&cov, &cell.mean, None));
                (*key, cell)
            })
            .collect();
        VoxelGrid {
            voxel_size: self.voxel_size,
            cells,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OdometryState {
    pub poses: Trajectory,
    pub local_map: LocalMap,
    pub deviations: DeviationStats,
}

impl OdometryState {
    pub fn new(config: &PipelineConfig) -> Self {
        Self {
            poses: Trajectory::default(),
            local_map: LocalMap::new(config.voxel_size_fine, config.odometry_max_points_per_voxel),
            deviations: DeviationStats::default(),
        }
    }
}

/// Outcome of registering one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanRegistration {
    pub pose: RigidTransform,
    /// True when the scan had too few map correspondences and the
    /// prediction was kept.
    pub rejected: bool,
    pub correspondences: usize,
    pub iterations: usize,
}

/// Constant-velocity prediction of the next pose.
pub fn predict_motion(state: &OdometryState) -> RigidTransform {
    match state.poses.poses.as_slice() {
        [] => RigidTransform::identity(),
        [only] => *only,
        [.., before, last] => last.compose(&before.inverse().compose(last)),
    }
}

/// Correspondence distance from the history of prediction errors.
pub fn adaptive_threshold(state: &OdometryState, default: f64) -> f64 {
    let d = &state.deviations;
    if d.count < 2 {
        return default;
    }
    let sigma = (d.sum_sq / d.count as f64).sqrt();
    (3.0 * sigma).clamp(THRESHOLD_FLOOR * default, default)
}

/// First point of every occupied cell, in key order.
fn subsample(points: &[Point3], voxel_size: f64) -> Vec<Point3> {
    let mut first: BTreeMap<VoxelKey, usize> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        first.entry(VoxelKey::of(p, voxel_size)).or_insert(i);
    }
    first.values().map(|&i| points[i]).collect()
}

fn skew(v: &Point3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

struct Icp {
    transform: RigidTransform,
    correspondences: usize,
    iterations: usize,
}

/// Huber-weighted point-to-point Gauss-Newton ICP.
fn point_to_point_icp(
    source: &[Point3],
    target: &[Point3],
    index: &SpatialIndex,
    init: &RigidTransform,
    threshold: f64,
    config: &PipelineConfig,
) -> Result<Icp> {
    let scale = threshold / 3.0;
    let mut transform = *init;
    let mut correspondences = 0;
    let mut iterations = 0;
    while iterations < config.icp_max_iterations {
        iterations += 1;
        let terms: Vec<Option<(Matrix6<f64>, Vector6<f64>)>> = source
            .par_iter()
            .map(|p| {
                let moved = transform.apply(p);
                index.nearest_point_within(&moved, threshold).map(|hit| {
                    let r = moved - target[hit.index];
                    let e = r.norm();
                    let w = if e <= scale { 1.0 } else { scale / e };
                    let mut j = nalgebra::Matrix3x6::zeros();
                    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&moved)));
                    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
                    (j.transpose() * j * w, j.transpose() * r * w)
                })
            })
            .collect();
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        correspondences = 0;
        for (hi, gi) in terms.into_iter().flatten() {
            h += hi;
            g += gi;
            correspondences += 1;
        }
        if correspondences < MIN_CORRESPONDENCES {
            return Err(Error::InsufficientOverlap {
                found: correspondences,
                required: MIN_CORRESPONDENCES,
            });
        }
        let step = solve_locked(&h, &g)?;
        let increment = RigidTransform::from_rotation_vector(
            step.fixed_rows::<3>(0).into_owned(),
            step.fixed_rows::<3>(3).into_owned(),
        );
        transform = increment.compose(&transform);
        if step.norm() < config.icp_convergence_eps {
            break;
        }
    }
    Ok(Icp {
        transform: transform.orthonormalized(),
        correspondences,
        iterations,
    })
}

/// Registers `scan` against the local map, appends its pose and merges the
/// full-resolution scan into the map.
pub fn register_scan(
    state: &mut OdometryState,
    scan: &PointCloud,
    config: &PipelineConfig,
) -> Result<ScanRegistration> {
    if scan.is_empty() {
        return Err(Error::argument("scan is empty"));
    }
    scan.validate()?;
    let prediction = predict_motion(state);

    let outcome = if state.poses.is_empty() {
        ScanRegistration {
            pose: RigidTransform::identity(),
            rejected: false,
            correspondences: 0,
            iterations: 0,
        }
    } else {
        let threshold = adaptive_threshold(state, config.odometry_initial_threshold);
        let source = subsample(&scan.points, config.odometry_voxel_size);
        let target = state.local_map.points();
        let icp = if target.is_empty() {
            Err(Error::InsufficientOverlap {
                found: 0,
                required: MIN_CORRESPONDENCES,
            })
        } else {
            let index = build_index(&target)?;
            point_to_point_icp(&source, &target, &index, &prediction, threshold, config)
        };
        match icp {
            Ok(icp) => {
                let deviation = prediction.inverse().compose(&icp.transform).translation.norm();
                state.deviations.push(deviation);
                ScanRegistration {
                    pose: icp.transform,
                    rejected: false,
                    correspondences: icp.correspondences,
                    iterations: icp.iterations,
                }
            }
            Err(Error::InsufficientOverlap { found, .. }) => ScanRegistration {
                pose: prediction,
                rejected: true,
                correspondences: found,
                iterations: 0,
            },
            Err(e) => return Err(e),
        }
    };

    state.poses.poses.push(outcome.pose);
    if !outcome.rejected {
        let moved: Vec<Point3> = scan.points.iter().map(|p| outcome.pose.apply(p)).collect();
        state.local_map.insert(&moved);
        state
            .local_map
            .evict(&outcome.pose.translation, config.local_map_radius);
    }
    Ok(outcome)
}

/// Runs odometry over `scans` in order and merges them into the first scan's frame.
pub fn combine_scans(
    scans: &[PointCloud],
    config: &PipelineConfig,
) -> Result<(PointCloud, Trajectory)> {
    if scans.is_empty() {
        return Err(Error::argument("at least one scan is required"));
    }
    let mut state = OdometryState::new(config);
    let mut combined = PointCloud::new();
    for scan in scans {
        let r = register_scan(&mut state, scan, config)?;
        combined.extend(&scan.transformed(&r.pose));
    }
    Ok((combined, state.poses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn state_with(poses: Vec<RigidTransform>) -> OdometryState {
        let mut s = OdometryState::new(&PipelineConfig::default());
        s.poses = Trajectory::new(poses);
        s
    }

    #[test]
    fn prediction_cases() {
        assert_eq!(predict_motion(&state_with(vec![])), RigidTransform::identity());
        let a = RigidTransform::from_yaw(0.3, Vector3::new(1.0, 2.0, 0.0));
        assert_eq!(predict_motion(&state_with(vec![a])), a);
        let p = predict_motion(&state_with(vec![a, a]));
        assert!((p.translation - a.translation).norm() < 1e-12);
        let step = |x: f64| RigidTransform::from_translation(Vector3::new(x, 0.0, 0.0));
        let p = predict_motion(&state_with(vec![step(0.0), step(1.0), step(2.0)]));
        assert!((p.translation - Vector3::new(3.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn threshold_formula_and_clamps() {
        let mut s = state_with(vec![]);
        assert_eq!(adaptive_threshold(&s, 1.0), 1.0);
        s.deviations.push(0.1);
        assert_eq!(adaptive_threshold(&s, 1.0), 1.0);
        s.deviations.push(0.1);
        assert!((adaptive_threshold(&s, 1.0) - 0.3).abs() < 1e-12);
        let mut s = state_with(vec![]);
        for _ in 0..5 {
            s.deviations.push(1e-6);
        }
        assert_eq!(adaptive_threshold(&s, 1.0), 0.1);
        s.deviations.push(100.0);
        assert_eq!(adaptive_threshold(&s, 1.0), 1.0);
    }

    #[test]
    fn subsample_keeps_first_point_per_cell() {
        let pts = vec![
            Vector3::new(0.1, 0.1, 0.1),
            Vector3::new(0.2, 0.2, 0.2),
            Vector3::new(1.2, 0.2, 0.2),
        ];
        assert_eq!(subsample(&pts, 0.5), vec![pts[0], pts[2]]);
    }

    #[test]
    fn empty_scan_rejected() {
        let config = PipelineConfig::default();
        let mut s = OdometryState::new(&config);
        assert!(register_scan(&mut s, &PointCloud::new(), &config).is_err());
    }

    #[test]
    fn singleton_sequence() {
        let scan = PointCloud::from_points(vec![Vector3::new(1.0, 2.0, 3.0)]);
        let (combined, traj) = combine_scans(std::slice::from_ref(&scan), &PipelineConfig::default()).unwrap();
        assert_eq!(combined, scan);
        assert_eq!(traj.poses, vec![RigidTransform::identity()]);
    }

    #[test]
    fn disjoint_scan_is_rejected_and_keeps_prediction() {
        let config = PipelineConfig::default();
        let a = PointCloud::from_points(
            (0..50).map(|i| Vector3::new(i as f64 * 0.3, (i % 5) as f64, 0.0)).collect(),
        );
        let b = a.transformed(&RigidTransform::from_translation(Vector3::new(500.0, 0.0, 0.0)));
        let mut s = OdometryState::new(&config);
        register_scan(&mut s, &a, &config).unwrap();
        let r = register_scan(&mut s, &b, &config).unwrap();
        assert!(r.rejected);
        assert_eq!(r.pose, RigidTransform::identity());
        assert_eq!(s.poses.len(), 2);
    }
}
