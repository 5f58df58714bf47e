//! Parking spaces from labeled reference clouds and occupancy from scans.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::spatial::build_index;

/// Half-extent padding so that fitted boxes contain their points despite rounding.
const CONTAINMENT_PAD: f64 = 1e-9;

/// Smallest box dimension; flat clusters still get a strictly positive extent.
const MIN_DIM: f64 = 1e-6;

/// Connected component of a cloud, as ascending point indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    pub point_indices: Vec<usize>,
}

/// Gravity-aligned box with a heading. `dims` are (length, width, height)
/// with length >= width; `yaw` in [0, pi) rotates the length axis from +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub centroid: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
}

impl OrientedBox {
    /// Coordinates of `p` in the box frame (origin at the centroid).
    pub fn local(&self, p: &Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        let d = p - Vector3::from(self.centroid);
        Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    pub fn contains(&self, p: &Point3) -> bool {
        let l = self.local(p);
        l.x.abs() <= self.dims[0] / 2.0
            && l.y.abs() <= self.dims[1] / 2.0
            && l.z.abs() <= self.dims[2] / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OccupancyState {
    Occupied,
    Vacant,
}

impl fmt::Display for OccupancyState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OccupancyState::Occupied => "occupied",
            OccupancyState::Vacant => "vacant",
        })
    }
}

/// A parking space; serializes flat as `{id, centroid, dims, yaw, state}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParkingSpace {
    pub id: u32,
    #[serde(flatten)]
    pub bbox: OrientedBox,
    pub state: OccupancyState,
}

/// Points whose label equals `class_id`, in input order.
pub fn extract_class(cloud: &PointCloud, class_id: u32) -> Result<PointCloud> {
    let labels = cloud
        .labels
        .as_ref()
        .ok_or_else(|| Error::argument("cloud has no labels"))?;
    let keep: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == class_id)
        .map(|(i, _)| i)
        .collect();
    Ok(cloud.select(&keep))
}

/// Connected components of the graph linking points at most `distance`
/// apart, dropping components with fewer than `min_points` points.
/// Clusters are ordered by their smallest point index.
pub fn euclidean_cluster(cloud: &PointCloud, distance: f64, min_points: usize) -> Result<Vec<Cluster>> {
    if !(distance.is_finite() && distance > 0.0) {
        return Err(Error::argument("cluster distance must be positive"));
    }
    if min_points == 0 {
        return Err(Error::argument("min_points must be at least 1"));
    }
    if cloud.is_empty() {
        return Ok(Vec::new());
    }
    let index = build_index(&cloud.points)?;
    let mut visited = vec![false; cloud.len()];
    let mut clusters = Vec::new();
    for seed in 0..cloud.len() {
        if visited[seed] {
            continue;
        }
        visited[seed] = true;
        let mut members = vec![seed];
        let mut head = 0;
        while head < members.len() {
            let p = cloud.points[members[head]];
            head += 1;
            for n in index.radius_query_point(&p, distance) {
                if !visited[n.index] {
                    visited[n.index] = true;
                    members.push(n.index);
                }
            }
        }
        if members.len() >= min_points {
            members.sort_unstable();
            clusters.push(Cluster {
                point_indices: members,
            });
        }
    }
    Ok(clusters)
}

fn fold_yaw(yaw: f64) -> f64 {
    let y = yaw.rem_euclid(PI);
    if y >= PI {
        0.0
    } else {
        y
    }
}

/// PCA-oriented gravity-aligned box enclosing `points`.
pub fn fit_oriented_box(points: &[Point3]) -> Result<OrientedBox> {
    if points.len() < 3 {
        return Err(Error::DegenerateGeometry(
            "box fitting needs at least 3 points".into(),
        ));
    }
    let n = points.len() as f64;
    let (mx, my) = points
        .iter()
        .fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
    let (mx, my) = (mx / n, my / n);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p.x - mx, p.y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx + syy == 0.0 {
        return Err(Error::DegenerateGeometry(
            "cluster has no horizontal extent".into(),
        ));
    }

    let mut yaw = fold_yaw(0.5 * (2.0 * sxy).atan2(sxx - syy));
    let extents = |yaw: f64| {
        let (s, c) = yaw.sin_cos();
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            let q = Vector3::new(c * p.x + s * p.y, -s * p.x + c * p.y, p.z);
            lo = lo.inf(&q);
            hi = hi.sup(&q);
        }
        (lo, hi)
    };
    let (mut lo, mut hi) = extents(yaw);
    if hi.y - lo.y > hi.x - lo.x {
        yaw = fold_yaw(yaw + PI / 2.0);
        (lo, hi) = extents(yaw);
    }

    let mid = (lo + hi) / 2.0;
    let (s, c) = yaw.sin_cos();
    let centroid = [c * mid.x - s * mid.y, s * mid.x + c * mid.y, mid.z];
    let dims = (hi - lo).map(|d| (d + 2.0 * CONTAINMENT_PAD).max(MIN_DIM));
    let mut bbox = OrientedBox {
        centroid,
        dims: [dims.x, dims.y, dims.z],
        yaw,
    };
    // The centroid round trip through the rotation can shift points by a few
    // ulps; grow the box until every point is inside.
    for p in points {
        let l = bbox.local(p);
        for (axis, v) in [l.x, l.y, l.z].into_iter().enumerate() {
            if v.abs() > bbox.dims[axis] / 2.0 {
                bbox.dims[axis] = 2.0 * v.abs() + 2.0 * CONTAINMENT_PAD;
            }
        }
    }
    Ok(bbox)
}

/// Number of `points` inside `bbox` (inclusive boundary).
pub fn points_in_box(bbox: &OrientedBox, points: &[Point3]) -> usize {
    points.iter().filter(|p| bbox.contains(p)).count()
}

/// Spaces from a labeled reference: extract cars, cluster, fit one box per cluster.
pub fn detect_spaces(
    reference: &PointCloud,
    car_label: u32,
    cluster_distance: f64,
    cluster_min_points: usize,
) -> Result<Vec<ParkingSpace>> {
    let cars = extract_class(reference, car_label)?;
    let clusters = euclidean_cluster(&cars, cluster_distance, cluster_min_points)?;
    clusters
        .iter()
        .enumerate()
        .map(|(id, cluster)| {
            let pts: Vec<Point3> = cluster.point_indices.iter().map(|&i| cars.points[i]).collect();
            Ok(ParkingSpace {
                id: id as u32,
                bbox: fit_oriented_box(&pts)?,
                state: OccupancyState::Occupied,
            })
        })
        .collect()
}

/// Re-derives every space's state from the car points of a localized scan.
pub fn update_occupancy(
    spaces: &[ParkingSpace],
    scan_car_points: &[Point3],
    min_points: usize,
) -> Vec<ParkingSpace> {
    spaces
        .par_iter()
        .map(|space| {
            let state = if points_in_box(&space.bbox, scan_car_points) >= min_points {
                OccupancyState::Occupied
            } else {
                OccupancyState::Vacant
            };
            ParkingSpace { state, ..*space }
        })
        .collect()
}
