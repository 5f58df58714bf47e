use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

use voxloc::evaluation::{error_histogram, evaluate_trajectory};
use voxloc::fpfh::{pair_angles, spfh, FpfhDescriptor, BINS_PER_FEATURE, DESCRIPTOR_LEN};
use voxloc::io::ply::{encode_ply, parse_ply};
use voxloc::io::poses::{format_poses, parse_poses};
use voxloc::io::PipelineConfig;
use voxloc::odometry::{adaptive_threshold, OdometryState};
use voxloc::parking::{
    euclidean_cluster, fit_oriented_box, points_in_box, update_occupancy, OccupancyState,
    OrientedBox, ParkingSpace,
};
use voxloc::registration::{estimate_rigid, evaluate_alignment, match_fpfh};
use voxloc::spatial::{build_index, distance, to_array};
use voxloc::voxel::{cell_statistics, estimate_normal, voxelize, CellAccumulator, VoxelKey};
use voxloc::{Point3, PointCloud, RigidTransform, Trajectory};

fn point(range: f64) -> impl Strategy<Value = Point3> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn cloud(range: f64, max: usize) -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec(point(range), 1..max)
}

fn transform() -> impl Strategy<Value = RigidTransform> {
    (point(3.2), point(100.0)).prop_map(|(w, t)| RigidTransform::from_rotation_vector(w, t))
}

fn unit() -> impl Strategy<Value = Vector3<f64>> {
    point(1.0)
        .prop_filter("non-zero", |v| v.norm() > 1e-3)
        .prop_map(|v| v.normalize())
}

fn rel_close(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) -> bool {
    (a - b).norm() <= tol * b.norm().max(1e-300)
}

proptest! {
    #[test]
    fn radius_query_matches_brute_force(pts in cloud(5.0, 300), q in point(6.0), r in 0.01..4.0f64) {
        let tree = build_index(&pts).unwrap();
        let got: Vec<usize> = tree.radius_query(&to_array(&q), r).iter().map(|n| n.index).collect();
        let mut want: Vec<(f64, usize)> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| (distance(&to_array(p), &to_array(&q)), i))
            .filter(|(d, _)| *d <= r)
            .collect();
        want.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        prop_assert_eq!(got, want.into_iter().map(|(_, i)| i).collect::<Vec<_>>());
    }

    #[test]
    fn k_nearest_is_prefix_of_k_plus_one(pts in cloud(5.0, 200), q in point(6.0), k in 1usize..20) {
        let tree = build_index(&pts).unwrap();
        let a = tree.k_nearest(&to_array(&q), k);
        let b = tree.k_nearest(&to_array(&q), k + 1);
        prop_assert_eq!(a.len(), k.min(pts.len()));
        prop_assert_eq!(&b[..a.len()], &a[..]);
    }

    #[test]
    fn nearest_within_matches_brute_force(pts in cloud(5.0, 300), q in point(6.0), r in 0.01..3.0f64) {
        let tree = build_index(&pts).unwrap();
        let got = tree.nearest_point_within(&q, r).map(|n| n.index);
        let want = pts
            .iter()
            .enumerate()
            .map(|(i, p)| (distance(&to_array(p), &to_array(&q)), i))
            .filter(|(d, _)| *d <= r)
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, i)| i);
        prop_assert_eq!(got, want);
    }

    #[test]
    fn voxel_keys_bound_their_points(p in point(1e4), s in 0.01..5.0f64) {
        let key = VoxelKey::of(&p, s);
        let lo = Vector3::new(key.ix as f64, key.iy as f64, key.iz as f64) * s;
        for a in 0..3 {
            prop_assert!(lo[a] <= p[a] * (1.0 + 1e-12) + 1e-12);
            prop_assert!(p[a] < lo[a] + s * (1.0 + 1e-9));
        }
    }

    #[test]
    fn voxel_counts_are_conserved(pts in cloud(20.0, 500), s in 0.05..3.0f64) {
        let grid = voxelize(&PointCloud::from_points(pts.clone()), s).unwrap();
        prop_assert_eq!(grid.total_count(), pts.len());
        prop_assert_eq!(grid.cells.values().map(|c| c.count).sum::<usize>(), pts.len());
        for (key, cell) in &grid.cells {
            if let Some(c) = cell.covariance {
                prop_assert_eq!(c, c.transpose());
                let eig = c.symmetric_eigenvalues();
                prop_assert!(eig.min() >= -1e-12);
            }
            if let Some(n) = cell.normal {
                prop_assert!((n.norm() - 1.0).abs() <= 1e-9);
            }
            prop_assert_eq!(VoxelKey::of(&cell.mean, s), *key);
        }
    }

    #[test]
    fn voxel_statistics_follow_integer_grid_shifts(
        pts in cloud(3.0, 300),
        shift in (-20i64..20, -20i64..20, -20i64..20),
    ) {
        let s = 0.5;
        let t = Vector3::new(shift.0 as f64, shift.1 as f64, shift.2 as f64) * s;
        let a = voxelize(&PointCloud::from_points(pts.clone()), s).unwrap();
        let b = voxelize(&PointCloud::from_points(pts.iter().map(|p| p + t).collect()), s).unwrap();
        // Points within rounding of a cell face may switch cells after the shift.
        prop_assume!(a.len() == b.len());
        for ((ka, ca), (kb, cb)) in a.cells.iter().zip(&b.cells) {
            prop_assert_eq!(
                (kb.ix - ka.ix, kb.iy - ka.iy, kb.iz - ka.iz),
                shift
            );
            prop_assert_eq!(ca.count, cb.count);
            prop_assert!((ca.mean + t - cb.mean).norm() <= 1e-9 * (1.0 + t.norm()));
            if let (Some(x), Some(y)) = (ca.covariance, cb.covariance) {
                prop_assert!((x - y).norm() <= 1e-9 * (1.0 + t.norm()) * x.norm().max(1e-12));
            }
        }
    }

    #[test]
    fn accumulator_merge_equals_sequential_push(pts in cloud(50.0, 200), split in 0usize..200) {
        let split = split.min(pts.len());
        let mut whole = CellAccumulator::default();
        let (mut left, mut right) = (CellAccumulator::default(), CellAccumulator::default());
        for (i, p) in pts.iter().enumerate() {
            whole.push(p, None);
            if i < split { left.push(p, None) } else { right.push(p, None) }
        }
        left.merge(&right);
        let (a, b) = (whole.to_cell(), left.to_cell());
        prop_assert_eq!(a.count, b.count);
        prop_assert!((a.mean - b.mean).norm() <= 1e-9 * (1.0 + a.mean.norm()));
        if let (Some(x), Some(y)) = (a.covariance, b.covariance) {
            prop_assert!((x - y).norm() <= 1e-9 * (1.0 + x.norm()));
        }
    }

    #[test]
    fn exact_plane_normals_are_orthogonal_to_the_plane(
        n in unit(),
        origin in point(50.0),
        coords in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 3..60),
    ) {
        let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let u = n.cross(&helper).normalize();
        let v = n.cross(&u);
        let pts: Vec<Point3> = coords.iter().map(|(a, b)| origin + u * *a + v * *b).collect();
        // Keep only well-spread samples; nearly collinear sets have no defined normal.
        let cell = cell_statistics(&pts, None).unwrap();
        let cov = cell.covariance.unwrap();
        let eig = cov.symmetric_eigenvalues();
        let mut sorted = [eig[0], eig[1], eig[2]];
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted[1] > 1e-3);
        let normal = estimate_normal(&cell, None).unwrap().unwrap();
        for p in &pts {
            prop_assert!((p - pts[0]).dot(&normal).abs() <= 1e-9);
        }
        prop_assert!(normal.z >= 0.0);
    }

    #[test]
    fn pair_angles_stay_in_range(pi in point(5.0), ni in unit(), pj in point(5.0), nj in unit()) {
        prop_assume!((pi - pj).norm() > 1e-6);
        let a = pair_angles(&pi, &ni, &pj, &nj).unwrap();
        prop_assert!((-1.0..=1.0).contains(&a.alpha));
        prop_assert!((-1.0..=1.0).contains(&a.phi));
        prop_assert!(a.theta > -std::f64::consts::PI && a.theta <= std::f64::consts::PI);
    }

    #[test]
    fn spfh_blocks_are_normalized(pts in cloud(2.0, 80), normals in prop::collection::vec(unit(), 80)) {
        let index = build_index(&pts).unwrap();
        let normals: Vec<_> = normals[..pts.len()].iter().copied().map(Some).collect();
        for i in 0..pts.len() {
            let h = spfh(&index, &normals, i, 1.5).unwrap();
            for block in h.bins.chunks(BINS_PER_FEATURE) {
                prop_assert!(block.iter().all(|b| b.is_finite() && *b >= 0.0));
                let sum: f64 = block.iter().sum();
                if h.pairs > 0 {
                    prop_assert!((sum - 1.0).abs() <= 1e-9);
                } else {
                    prop_assert_eq!(sum, 0.0);
                }
            }
        }
    }

    #[test]
    fn match_fpfh_matches_brute_force(
        src in prop::collection::vec(prop::collection::vec(0.0..1.0f64, DESCRIPTOR_LEN), 1..40),
        dst in prop::collection::vec(prop::collection::vec(0.0..1.0f64, DESCRIPTOR_LEN), 1..40),
    ) {
        let desc = |v: &Vec<Vec<f64>>| -> Vec<FpfhDescriptor> {
            v.iter().map(|d| FpfhDescriptor { bins: d.clone().try_into().unwrap() }).collect()
        };
        let (s, t) = (desc(&src), desc(&dst));
        for m in match_fpfh(&s, &t).unwrap() {
            let best = t
                .iter()
                .enumerate()
                .map(|(j, d)| (distance(&s[m.source_index].bins, &d.bins), j))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .unwrap();
            prop_assert_eq!(m.target_index, best.1);
            prop_assert_eq!(m.distance, best.0);
        }
    }

    #[test]
    fn evaluate_alignment_matches_brute_force(
        src in cloud(5.0, 100),
        dst in cloud(5.0, 100),
        t in transform(),
        threshold in 0.1..3.0f64,
    ) {
        let index = build_index(&dst).unwrap();
        let moved: Vec<Point3> = src.iter().map(|p| t.inverse().apply(p)).collect();
        let (fitness, rmse) = evaluate_alignment(&moved, &index, &t, threshold);
        let hits: Vec<f64> = moved
            .iter()
            .map(|p| t.apply(p))
            .filter_map(|q| {
                dst.iter()
                    .map(|d| distance(&to_array(&q), &to_array(d)))
                    .filter(|d| *d <= threshold)
                    .min_by(f64::total_cmp)
            })
            .collect();
        prop_assert!((0.0..=1.0).contains(&fitness));
        prop_assert!(rmse >= 0.0 && rmse <= threshold);
        prop_assert!((fitness - hits.len() as f64 / src.len() as f64).abs() <= 1e-12);
        if !hits.is_empty() {
            let want = (hits.iter().map(|d| d * d).sum::<f64>() / hits.len() as f64).sqrt();
            prop_assert!((rmse - want).abs() <= 1e-9);
        }
    }

    #[test]
    fn rigid_estimates_are_proper_rotations(src in cloud(10.0, 30), dst in cloud(10.0, 30)) {
        let n = src.len().min(dst.len());
        if let Ok(t) = estimate_rigid(&src[..n], &dst[..n]) {
            prop_assert!(t.is_valid(1e-9));
        }
        let mirrored: Vec<Point3> = src.iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect();
        if let Ok(t) = estimate_rigid(&src, &mirrored) {
            prop_assert!(t.is_valid(1e-9));
        }
    }

    #[test]
    fn composition_and_inversion_stay_rigid(a in transform(), b in transform(), p in point(50.0)) {
        let ab = a.compose(&b);
        prop_assert!(ab.is_valid(1e-9));
        prop_assert!(a.inverse().is_valid(1e-9));
        prop_assert!((ab.apply(&p) - a.apply(&b.apply(&p))).norm() <= 1e-9 * (1.0 + p.norm() + 200.0));
        prop_assert!((a.inverse().apply(&a.apply(&p)) - p).norm() <= 1e-9 * (1.0 + p.norm() + 100.0));
    }

    #[test]
    fn adaptive_threshold_stays_in_range(
        deviations in prop::collection::vec(0.0..50.0f64, 0..40),
        default in 0.1..5.0f64,
    ) {
        let mut state = OdometryState::new(&PipelineConfig::default());
        for d in deviations {
            state.deviations.push(d);
            let t = adaptive_threshold(&state, default);
            prop_assert!(t >= 0.1 * default && t <= default);
        }
    }

    #[test]
    fn histogram_counts_are_conserved(
        errors in prop::collection::vec(0.0..0.5f64, 0..60),
        width in 0.0005..0.2f64,
    ) {
        let h = error_histogram(&errors, width).unwrap();
        prop_assert_eq!(h.total(), errors.len());
        prop_assert_eq!(h.bin_edges.len(), h.counts.len() + 1);
        prop_assert!(h.bin_edges.windows(2).all(|w| w[0] < w[1]));
        for e in &errors {
            prop_assert!(*e <= *h.bin_edges.last().unwrap());
        }
    }

    #[test]
    fn trajectory_errors_ignore_common_offsets(
        poses in prop::collection::vec((transform(), transform()), 1..20),
        offset in point(1000.0),
    ) {
        let (est, gt): (Vec<_>, Vec<_>) = poses.into_iter().unzip();
        let shift = |v: &[RigidTransform]| {
            Trajectory::new(v.iter().map(|p| RigidTransform { translation: p.translation + offset, ..*p }).collect())
        };
        let a = evaluate_trajectory(&Trajectory::new(est.clone()), &Trajectory::new(gt.clone())).unwrap();
        let b = evaluate_trajectory(&shift(&est), &shift(&gt)).unwrap();
        for (x, y) in a.xy_error.iter().zip(&b.xy_error).chain(a.z_error.iter().zip(&b.z_error)) {
            prop_assert!(*x >= 0.0);
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + offset.norm()));
        }
    }

    #[test]
    fn clusters_partition_their_points(pts in cloud(6.0, 300), d in 0.1..1.5f64, min in 1usize..10) {
        let cloud = PointCloud::from_points(pts.clone());
        let clusters = euclidean_cluster(&cloud, d, min).unwrap();
        let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
        for (c, cluster) in clusters.iter().enumerate() {
            prop_assert!(cluster.point_indices.len() >= min);
            for &i in &cluster.point_indices {
                prop_assert!(owner.insert(i, c).is_none());
            }
        }
        // Any two points within `d` share a fate: same cluster or both dropped.
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                if distance(&to_array(&pts[i]), &to_array(&pts[j])) <= d {
                    prop_assert_eq!(owner.get(&i), owner.get(&j));
                }
            }
        }
    }

    #[test]
    fn fitted_boxes_contain_their_points(pts in cloud(5.0, 200)) {
        prop_assume!(pts.len() >= 3);
        let b = fit_oriented_box(&pts).unwrap();
        prop_assert_eq!(points_in_box(&b, &pts), pts.len());
        prop_assert!(b.dims.iter().all(|d| *d > 0.0));
        prop_assert!(b.dims[0] >= b.dims[1]);
        prop_assert!((0.0..std::f64::consts::PI).contains(&b.yaw));
    }

    #[test]
    fn occupancy_is_idempotent_and_monotone(
        boxes in prop::collection::vec((point(10.0), 0.5..5.0f64, 0.0..std::f64::consts::PI), 1..8),
        scan in cloud(12.0, 300),
        extra in cloud(12.0, 100),
        min in 1usize..15,
    ) {
        let spaces: Vec<ParkingSpace> = boxes
            .iter()
            .enumerate()
            .map(|(id, (c, l, yaw))| ParkingSpace {
                id: id as u32,
                bbox: OrientedBox { centroid: [c.x, c.y, c.z], dims: [*l * 2.0, *l, 3.0], yaw: *yaw },
                state: OccupancyState::Occupied,
            })
            .collect();
        let once = update_occupancy(&spaces, &scan, min);
        prop_assert_eq!(&update_occupancy(&once, &scan, min), &once);
        let mut more = scan.clone();
        more.extend(extra);
        let grown = update_occupancy(&spaces, &more, min);
        for (a, b) in once.iter().zip(&grown) {
            prop_assert_eq!(a.id, b.id);
            prop_assert!(a.state == OccupancyState::Vacant || b.state == OccupancyState::Occupied);
        }
    }

    #[test]
    fn binary_ply_is_bit_exact(bits in prop::collection::vec(any::<u64>(), 3..300)) {
        let pts: Vec<Point3> = bits
            .chunks_exact(3)
            .map(|c| c.iter().map(|b| f64::from_bits(b & 0x7fef_ffff_ffff_ffff | b & (1 << 63))).collect::<Vec<_>>())
            .map(|v| Vector3::new(v[0], v[1], v[2]))
            .collect();
        let cloud = PointCloud::from_points(pts);
        let back = parse_ply(&encode_ply(&cloud, true).unwrap()).unwrap();
        let raw = |c: &PointCloud| c.points.iter().flat_map(|p| [p.x, p.y, p.z]).map(f64::to_bits).collect::<Vec<_>>();
        prop_assert_eq!(raw(&back), raw(&cloud));
    }

    #[test]
    fn ascii_ply_round_trips(pts in cloud(1e3, 100)) {
        let cloud = PointCloud::from_points(pts);
        let back = parse_ply(&encode_ply(&cloud, false).unwrap()).unwrap();
        prop_assert_eq!(back.points, cloud.points);
    }

    #[test]
    fn pose_text_round_trips(poses in prop::collection::vec(transform(), 1..30)) {
        let t = Trajectory::new(poses);
        let back = parse_poses(&format_poses(&t)).unwrap();
        prop_assert_eq!(back.len(), t.len());
        for (a, b) in t.poses.iter().zip(&back.poses) {
            prop_assert!((a.rotation - b.rotation).norm() <= 1e-9);
            prop_assert!((a.translation - b.translation).norm() <= 1e-9);
            prop_assert!((b.rotation.determinant() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn covariance_matches_two_pass_on_a_skewed_cell() {
    let pts: Vec<Point3> = (0..50)
        .map(|i| {
            let t = i as f64 * 0.01;
            Vector3::new(1e3 + t, 2e3 + t * t, -5e2 + (t * 7.0).sin() * 0.01)
        })
        .collect();
    let n = pts.len() as f64;
    let mean = pts.iter().sum::<Point3>() / n;
    let cov = pts.iter().map(|p| (p - mean) * (p - mean).transpose()).sum::<Matrix3<f64>>() / (n - 1.0);
    let cell = cell_statistics(&pts, None).unwrap();
    assert!(rel_close(&cell.covariance.unwrap(), &cov, 1e-9));
}
