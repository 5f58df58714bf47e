//! Seeded synthetic street scenes: a labeled reference map, simulated scans
//! and their ground-truth poses.

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::TAU;

use crate::cloud::{Point3, PointCloud, RigidTransform, Rgb, Trajectory};
use crate::error::{Error, Result};
use crate::parking::OrientedBox;

pub const LABEL_GROUND: u32 = 0;
pub const LABEL_FACADE: u32 = 1;
pub const LABEL_CAR: u32 = 2;
pub const LABEL_VEGETATION: u32 = 3;

const GROUND_COLOR: Rgb = [110, 110, 105];
const FACADE_COLOR: Rgb = [205, 185, 150];
const CAR_COLOR: Rgb = [170, 35, 35];
const POLE_COLOR: Rgb = [70, 70, 75];
const TREE_COLOR: Rgb = [60, 120, 50];
const WINDOW_COLOR: Rgb = [90, 100, 120];

const WINDOW_WIDTH: f64 = 1.2;
const WINDOW_HEIGHT: f64 = 1.5;
const WINDOW_DEPTH: f64 = 0.25;
const FLOOR_HEIGHT: f64 = 3.0;

const CAR_DIMS: [f64; 3] = [4.4, 1.8, 1.5];
const SENSOR_HEIGHT: f64 = 1.8;

/// Scene parameters. Lengths are meters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub street_length: f64,
    /// Distance from the street axis (y = 0) to the nearest facade line.
    pub street_half_width: f64,
    pub car_count: usize,
    /// Cars present in the reference but absent from the scans.
    pub vacated_cars: usize,
    pub noise_sigma: f64,
    pub scan_count: usize,
    /// Forward motion between consecutive scans.
    pub scan_step: f64,
    pub points_per_scan: usize,
    pub sensor_range: f64,
    /// Jittered-grid spacing of the reference surfaces.
    pub reference_spacing: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            street_length: 70.0,
            street_half_width: 8.0,
            car_count: 8,
            vacated_cars: 3,
            noise_sigma: 0.02,
            scan_count: 20,
            scan_step: 1.0,
            points_per_scan: 25_000,
            sensor_range: 30.0,
            reference_spacing: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("street_length", self.street_length),
            ("street_half_width", self.street_half_width),
            ("sensor_range", self.sensor_range),
            ("reference_spacing", self.reference_spacing),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::argument(format!("{name} must be positive")));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::argument("noise_sigma must be non-negative"));
        }
        if !(self.scan_step.is_finite() && self.scan_step >= 0.0) {
            return Err(Error::argument("scan_step must be non-negative"));
        }
        if self.scan_count == 0 || self.points_per_scan == 0 {
            return Err(Error::argument("scan_count and points_per_scan must be positive"));
        }
        if self.vacated_cars > self.car_count {
            return Err(Error::argument("vacated_cars exceeds car_count"));
        }
        let path = self.scan_step * (self.scan_count - 1) as f64;
        if path >= self.street_length {
            return Err(Error::argument("trajectory is longer than the street"));
        }
        if self.car_count as f64 * (CAR_DIMS[0] + 1.5) > 2.0 * self.street_length {
            return Err(Error::argument("too many cars for the street length"));
        }
        Ok(())
    }
}

/// Generated scene. Scans are in their sensor frames; `ground_truth[k]`
/// maps scan `k` into the reference frame.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub reference: PointCloud,
    pub scans: Vec<PointCloud>,
    pub ground_truth: Trajectory,
    /// Boxes of every parked car in the reference epoch.
    pub car_boxes: Vec<OrientedBox>,
    /// Indices into `car_boxes` of cars missing from the scans.
    pub vacated: Vec<usize>,
}

struct Builder {
    rng: ChaCha8Rng,
    spacing: f64,
    points: Vec<Point3>,
    colors: Vec<Rgb>,
    labels: Vec<u32>,
    /// Car index of each point, if any.
    owners: Vec<Option<usize>>,
}

impl Builder {
    /// Jittered grid over the parallelogram `origin + a u + b v`, a in [0, |u|], b in [0, |v|].
    fn patch(&mut self, origin: Point3, u: Vector3<f64>, v: Vector3<f64>, label: u32, color: Rgb, owner: Option<usize>) {
        let (lu, lv) = (u.norm(), v.norm());
        let (nu, nv) = (
            (lu / self.spacing).round().max(1.0) as usize,
            (lv / self.spacing).round().max(1.0) as usize,
        );
        let (du, dv) = (u / nu as f64, v / nv as f64);
        for i in 0..nu {
            for j in 0..nv {
                let a = i as f64 + self.rng.random::<f64>();
                let b = j as f64 + self.rng.random::<f64>();
                self.points.push(origin + du * a + dv * b);
                self.colors.push(color);
                self.labels.push(label);
                self.owners.push(owner);
            }
        }
    }

    fn cuboid(&mut self, bbox: &OrientedBox, label: u32, color: Rgb, owner: Option<usize>) {
        let (s, c) = bbox.yaw.sin_cos();
        let ex = Vector3::new(c, s, 0.0) * bbox.dims[0];
        let ey = Vector3::new(-s, c, 0.0) * bbox.dims[1];
        let ez = Vector3::z() * bbox.dims[2];
        let o = Vector3::from(bbox.centroid) - (ex + ey + ez) / 2.0;
        self.patch(o, ex, ez, label, color, owner);
        self.patch(o + ey, ex, ez, label, color, owner);
        self.patch(o, ey, ez, label, color, owner);
        self.patch(o + ex, ey, ez, label, color, owner);
        self.patch(o + ez, ex, ey, label, color, owner);
    }

    /// Vertical cylinder side surface standing on `base`.
    fn cylinder(&mut self, base: Point3, radius: f64, height: f64, label: u32, color: Rgb) {
        let around = ((TAU * radius / self.spacing).ceil() as usize).max(6);
        let rows = ((height / self.spacing).ceil() as usize).max(1);
        for k in 0..around {
            for r in 0..rows {
                let t = (k as f64 + self.rng.random::<f64>()) / around as f64 * TAU;
                let z = (r as f64 + self.rng.random::<f64>()) * height / rows as f64;
                self.push(base + Vector3::new(radius * t.cos(), radius * t.sin(), z), label, color);
            }
        }
    }

    /// Sphere surface; uniform in azimuth and height gives uniform area density.
    fn sphere(&mut self, center: Point3, radius: f64, label: u32, color: Rgb) {
        let around = ((TAU * radius / self.spacing).ceil() as usize).max(6);
        let rows = ((2.0 * radius / self.spacing).ceil() as usize).max(1);
        for k in 0..around {
            for r in 0..rows {
                let t = (k as f64 + self.rng.random::<f64>()) / around as f64 * TAU;
                let z = -radius + (r as f64 + self.rng.random::<f64>()) * 2.0 * radius / rows as f64;
                let ring = (radius * radius - z * z).max(0.0).sqrt();
                self.push(center + Vector3::new(ring * t.cos(), ring * t.sin(), z), label, color);
            }
        }
    }

    /// Drops points added since `start` that satisfy `cut`.
    fn cut_since(&mut self, start: usize, cut: impl Fn(&Point3) -> bool) {
        let mut keep = start;
        for i in start..self.points.len() {
            if !cut(&self.points[i]) {
                self.points.swap(keep, i);
                self.colors.swap(keep, i);
                self.labels.swap(keep, i);
                self.owners.swap(keep, i);
                keep += 1;
            }
        }
        self.points.truncate(keep);
        self.colors.truncate(keep);
        self.labels.truncate(keep);
        self.owners.truncate(keep);
    }

    fn push(&mut self, p: Point3, label: u32, color: Rgb) {
        self.points.push(p);
        self.colors.push(color);
        self.labels.push(label);
        self.owners.push(None);
    }
}

/// Row of houses along one side. `side` is +1 (y > 0) or -1.
fn houses(b: &mut Builder, spec: &SceneSpec, side: f64) {
    let depth = 8.0;
    let mut x = b.rng.random_range(0.0..3.0);
    while x < spec.street_length - 4.0 {
        let width = b.rng.random_range(7.0..13.0f64).min(spec.street_length - x);
        let height = b.rng.random_range(5.0..10.0);
        let setback = b.rng.random_range(0.0..3.0);
        let y = side * (spec.street_half_width + setback);
        let outward = Vector3::new(0.0, side * depth, 0.0);
        let up = Vector3::new(0.0, 0.0, height);
        let front = Vector3::new(x, y, 0.0);
        front_wall(b, front, width, height, side);
        b.patch(front, outward, up, LABEL_FACADE, FACADE_COLOR, None);
        b.patch(front + Vector3::new(width, 0.0, 0.0), outward, up, LABEL_FACADE, FACADE_COLOR, None);
        for _ in 0..b.rng.random_range(0..3) {
            let bay_width = b.rng.random_range(1.5..3.5f64).min(width - 1.0);
            let bay_height = b.rng.random_range(1.5..3.0f64).min(height - 1.0);
            let protrusion = b.rng.random_range(0.6..1.2);
            let bx = x + b.rng.random_range(0.5..(width - bay_width - 0.5).max(0.6));
            let bz = b.rng.random_range(0.5..(height - bay_height).max(0.6));
            let bay = OrientedBox {
                centroid: [bx + bay_width / 2.0, y - side * protrusion / 2.0, bz + bay_height / 2.0],
                dims: [bay_width, protrusion, bay_height],
                yaw: 0.0,
            };
            b.cuboid(&bay, LABEL_FACADE, FACADE_COLOR, None);
        }
        x += width + b.rng.random_range(2.0..5.0);
    }
}

/// Street-facing wall with rows of recessed windows.
fn front_wall(b: &mut Builder, front: Point3, width: f64, height: f64, side: f64) {
    let mut windows = Vec::new();
    let mut sill = 1.0;
    while sill + WINDOW_HEIGHT < height - 0.5 {
        let mut wx = b.rng.random_range(0.6..1.2);
        while wx + WINDOW_WIDTH < width - 0.5 {
            windows.push((front.x + wx, front.z + sill));
            wx += WINDOW_WIDTH + b.rng.random_range(1.0..2.0);
        }
        sill += FLOOR_HEIGHT;
    }
    let start = b.points.len();
    b.patch(
        front,
        Vector3::new(width, 0.0, 0.0),
        Vector3::new(0.0, 0.0, height),
        LABEL_FACADE,
        FACADE_COLOR,
        None,
    );
    b.cut_since(start, |p| {
        windows.iter().any(|&(x, z)| {
            p.x > x && p.x < x + WINDOW_WIDTH && p.z > z && p.z < z + WINDOW_HEIGHT
        })
    });
    let across = Vector3::new(WINDOW_WIDTH, 0.0, 0.0);
    let tall = Vector3::new(0.0, 0.0, WINDOW_HEIGHT);
    let inward = Vector3::new(0.0, side * WINDOW_DEPTH, 0.0);
    for (x, z) in windows {
        let corner = Vector3::new(x, front.y, z);
        b.patch(corner + inward, across, tall, LABEL_FACADE, WINDOW_COLOR, None);
        b.patch(corner, inward, tall, LABEL_FACADE, FACADE_COLOR, None);
        b.patch(corner + across, inward, tall, LABEL_FACADE, FACADE_COLOR, None);
        b.patch(corner, across, inward, LABEL_FACADE, FACADE_COLOR, None);
        b.patch(corner + tall, across, inward, LABEL_FACADE, FACADE_COLOR, None);
    }
}

/// Builds the reference map, scans and ground-truth trajectory.
pub fn generate_synthetic_scene(seed: u64, spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        spacing: spec.reference_spacing,
        points: Vec::new(),
        colors: Vec::new(),
        labels: Vec::new(),
        owners: Vec::new(),
    };
    let ground_half = spec.street_half_width + 4.0;
    b.patch(
        Vector3::new(0.0, -ground_half, 0.0),
        Vector3::new(spec.street_length, 0.0, 0.0),
        Vector3::new(0.0, 2.0 * ground_half, 0.0),
        LABEL_GROUND,
        GROUND_COLOR,
        None,
    );
    houses(&mut b, spec, 1.0);
    houses(&mut b, spec, -1.0);

    let mut poles = 0.0;
    while poles < spec.street_length {
        let x = poles + b.rng.random_range(2.0..12.0);
        if x < spec.street_length {
            let side = if b.rng.random::<bool>() { 1.0 } else { -1.0 };
            b.cylinder(
                Vector3::new(x, side * (spec.street_half_width - 0.4), 0.0),
                0.12,
                5.0,
                LABEL_FACADE,
                POLE_COLOR,
            );
        }
        poles = x;
    }

    let mut trees = 0.0;
    while trees < spec.street_length {
        let x = trees + b.rng.random_range(4.0..14.0);
        if x < spec.street_length {
            let side = if b.rng.random::<bool>() { 1.0 } else { -1.0 };
            let y = side * (spec.street_half_width + b.rng.random_range(0.5..2.0));
            let trunk = b.rng.random_range(1.8..3.0);
            let crown = b.rng.random_range(1.0..2.2);
            b.cylinder(Vector3::new(x, y, 0.0), 0.15, trunk, LABEL_VEGETATION, TREE_COLOR);
            b.sphere(Vector3::new(x, y, trunk + 0.8 * crown), crown, LABEL_VEGETATION, TREE_COLOR);
        }
        trees = x;
    }

    // Cars alternate sides, spaced along the street with random gaps.
    let mut car_boxes = Vec::with_capacity(spec.car_count);
    let per_side = spec.car_count.div_ceil(2);
    let slot = spec.street_length / per_side as f64;
    for k in 0..spec.car_count {
        let side = if k % 2 == 0 { 1.0 } else { -1.0 };
        let along = (k / 2) as f64 * slot + b.rng.random_range(0.0..(slot - CAR_DIMS[0]).max(0.0)) + CAR_DIMS[0] / 2.0;
        let bbox = OrientedBox {
            centroid: [
                along.min(spec.street_length - CAR_DIMS[0] / 2.0),
                side * (spec.street_half_width - 1.6),
                CAR_DIMS[2] / 2.0,
            ],
            dims: CAR_DIMS,
            yaw: b.rng.random_range(-0.08..0.08f64).rem_euclid(std::f64::consts::PI),
        };
        b.cuboid(&bbox, LABEL_CAR, CAR_COLOR, Some(k));
        car_boxes.push(bbox);
    }

    let mut vacated: Vec<usize> = sample(&mut b.rng, spec.car_count, spec.vacated_cars).into_vec();
    vacated.sort_unstable();

    let x0 = (spec.street_length - spec.scan_step * (spec.scan_count - 1) as f64) / 2.0;
    let poses: Vec<RigidTransform> = (0..spec.scan_count)
        .map(|k| {
            let t = k as f64;
            RigidTransform::from_yaw(
                0.03 * (t / 3.0).sin(),
                Vector3::new(x0 + t * spec.scan_step, 0.4 * (t / 5.0).sin(), SENSOR_HEIGHT),
            )
        })
        .collect();

    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::argument(e.to_string()))?;
    let visible: Vec<usize> = (0..b.points.len())
        .filter(|&i| b.owners[i].is_none_or(|car| vacated.binary_search(&car).is_err()))
        .collect();
    let mut scans = Vec::with_capacity(spec.scan_count);
    for pose in &poses {
        let in_range: Vec<usize> = visible
            .iter()
            .copied()
            .filter(|&i| (b.points[i] - pose.translation).norm() <= spec.sensor_range)
            .collect();
        let mut chosen: Vec<usize> = if in_range.len() > spec.points_per_scan {
            sample(&mut b.rng, in_range.len(), spec.points_per_scan)
                .into_iter()
                .map(|j| in_range[j])
                .collect()
        } else {
            in_range
        };
        chosen.sort_unstable();
        let to_sensor = pose.inverse();
        let points = chosen
            .iter()
            .map(|&i| {
                let mut p = to_sensor.apply(&b.points[i]);
                if spec.noise_sigma > 0.0 {
                    p += Vector3::from_fn(|_, _| noise.sample(&mut b.rng));
                }
                p
            })
            .collect();
        scans.push(PointCloud {
            points,
            colors: None,
            labels: Some(chosen.iter().map(|&i| b.labels[i]).collect()),
        });
    }

    Ok(SyntheticScene {
        reference: PointCloud {
            points: b.points,
            colors: Some(b.colors),
            labels: Some(b.labels),
        },
        scans,
        ground_truth: Trajectory::new(poses),
        car_boxes,
        vacated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::build_index;

    fn small() -> SceneSpec {
        SceneSpec {
            street_length: 20.0,
            car_count: 2,
            vacated_cars: 1,
            scan_count: 3,
            points_per_scan: 2000,
            reference_spacing: 0.2,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_synthetic_scene(5, &small()).unwrap();
        let b = generate_synthetic_scene(5, &small()).unwrap();
        assert_eq!(a.reference, b.reference);
        assert_eq!(a.scans, b.scans);
        assert_eq!(a.ground_truth, b.ground_truth);
    }

    #[test]
    fn noiseless_scans_lie_on_reference() {
        let spec = SceneSpec {
            noise_sigma: 0.0,
            car_count: 0,
            vacated_cars: 0,
            ..small()
        };
        let scene = generate_synthetic_scene(1, &spec).unwrap();
        let index = build_index(&scene.reference.points).unwrap();
        for (scan, pose) in scene.scans.iter().zip(&scene.ground_truth.poses) {
            assert_eq!(scan.len(), spec.points_per_scan);
            for p in &scan.points {
                let hit = index.k_nearest_point(&pose.apply(p), 1)[0];
                assert!(hit.distance < 1e-12);
            }
        }
    }

    #[test]
    fn vacated_cars_absent_from_scans() {
        let scene = generate_synthetic_scene(2, &small()).unwrap();
        assert_eq!(scene.vacated.len(), 1);
        let gone = scene.car_boxes[scene.vacated[0]];
        for (scan, pose) in scene.scans.iter().zip(&scene.ground_truth.poses) {
            for (p, &l) in scan.points.iter().zip(scan.labels.as_ref().unwrap()) {
                if l == LABEL_CAR {
                    assert!(!gone.contains(&pose.apply(p)));
                }
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = [
            SceneSpec { noise_sigma: -1.0, ..small() },
            SceneSpec { scan_count: 0, ..small() },
            SceneSpec { vacated_cars: 5, ..small() },
            SceneSpec { scan_step: 10.0, ..small() },
        ];
        for spec in bad {
            assert!(generate_synthetic_scene(0, &spec).is_err());
        }
    }
}
