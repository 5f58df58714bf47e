use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxloc::io::PipelineConfig;
use voxloc::odometry::{combine_scans, register_scan, OdometryState};
use voxloc::pipeline::coarse_features;
use voxloc::registration::{
    evaluate_alignment, icp_point_to_plane, icp_point_to_plane_with_target, ransac_coarse,
    IcpParams, PlaneTarget,
};
use voxloc::spatial::build_index;
use voxloc::synth::{generate_synthetic_scene, SceneSpec, SyntheticScene};
use voxloc::voxel::{downsample, voxelize};
use voxloc::{PointCloud, RigidTransform};

fn small_scene(noise_sigma: f64) -> SyntheticScene {
    let spec = SceneSpec {
        street_length: 40.0,
        car_count: 4,
        vacated_cars: 0,
        noise_sigma,
        scan_count: 4,
        points_per_scan: 8000,
        sensor_range: 25.0,
        ..SceneSpec::default()
    };
    generate_synthetic_scene(3, &spec).unwrap()
}

/// Desk top with a few boxes on it, sampled on a 5 mm grid.
fn desk(seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 0.005;
    let mut pts = Vec::new();
    let mut patch = |origin: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>| {
        let (nu, nv) = ((u.norm() / step) as usize, (v.norm() / step) as usize);
        for i in 0..=nu {
            for j in 0..=nv {
                pts.push(origin + u * (i as f64 / nu as f64) + v * (j as f64 / nv as f64));
            }
        }
    };
    patch(Vector3::zeros(), Vector3::x() * 1.2, Vector3::y() * 0.7);
    for _ in 0..4 {
        let o = Vector3::new(rng.random_range(0.05..0.9), rng.random_range(0.05..0.45), 0.0);
        let (a, b, c) = (
            rng.random_range(0.08..0.25),
            rng.random_range(0.08..0.2),
            rng.random_range(0.05..0.3),
        );
        let (x, y, z) = (Vector3::x() * a, Vector3::y() * b, Vector3::z() * c);
        patch(o + z, x, y);
        patch(o, x, z);
        patch(o + y, x, z);
        patch(o, y, z);
        patch(o + x, y, z);
    }
    pts
}

#[test]
fn icp_rmse_never_increases_at_desk_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = IcpParams {
        max_correspondence_distance: 0.05,
        max_iterations: 50,
        convergence_eps: 1e-9,
    };
    for seed in 0..25 {
        let pts = desk(seed);
        let grid = voxelize(&PointCloud::from_points(pts.clone()), 0.02).unwrap();
        let target = PlaneTarget::from_grid(&grid).unwrap();
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let shift = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let nudge = RigidTransform::from_rotation_vector(axis.normalize() * 0.03, shift.normalize() * 0.01);
        let (source, _) = grid.oriented_means();
        let r = icp_point_to_plane_with_target(&source, &target, &nudge, &params).unwrap();
        for w in r.rmse_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "seed {seed}: {:?}", r.rmse_history);
        }
        assert!(r.converged);
    }
}

#[test]
fn icp_recovers_a_scan_from_a_nearby_start() {
    let scene = small_scene(0.01);
    let grid = voxelize(&scene.reference, 0.1).unwrap();
    let truth = scene.ground_truth.poses[1];
    let init = truth.compose(&RigidTransform::from_yaw(0.05, Vector3::new(0.3, 0.2, 0.0)));
    let r = icp_point_to_plane(&scene.scans[1], &grid, &init, &PipelineConfig::default()).unwrap();
    let err = (r.transform.translation - truth.translation).norm();
    assert!(err < 0.02, "error {err} fitness {} history {:?}", r.fitness, r.rmse_history);
    assert!(r.fitness > 0.9);
    assert!(r.inlier_rmse <= PipelineConfig::default().icp_max_correspondence_distance);
}

#[test]
fn ransac_is_reproducible_across_worker_counts() {
    let scene = small_scene(0.02);
    let config = PipelineConfig::default();
    let grid = voxelize(&scene.reference, config.voxel_size_fine).unwrap();
    let (combined, _) = combine_scans(&scene.scans, &config).unwrap();
    let (tp, td) = coarse_features(&downsample(&grid), &config).unwrap();
    let (sp, sd) = coarse_features(&combined, &config).unwrap();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| ransac_coarse(&sp, &tp, &sd, &td, &config, 11).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one, run(1));

    // The reported scores are those of the returned transform.
    let index = build_index(&tp.points).unwrap();
    let (fitness, rmse) = evaluate_alignment(&sp.points, &index, &one.transform, config.ransac_distance_threshold);
    assert_eq!((fitness, rmse), (one.fitness, one.inlier_rmse));
    assert!(one.transform.is_valid(1e-9));
}

#[test]
fn odometry_starts_at_identity_and_keeps_every_point() {
    let scene = small_scene(0.02);
    let config = PipelineConfig::default();
    let (combined, poses) = combine_scans(&scene.scans, &config).unwrap();
    assert_eq!(poses.len(), scene.scans.len());
    assert_eq!(poses.poses[0], RigidTransform::identity());
    assert_eq!(combined.len(), scene.scans.iter().map(|s| s.len()).sum::<usize>());
    assert_eq!(combined.labels.as_ref().map(|l| l.len()), Some(combined.len()));
}

#[test]
fn exact_overlap_reproduces_relative_motion() {
    let scene = small_scene(0.0);
    let config = PipelineConfig::default();
    let first = &scene.scans[0];
    let motion = RigidTransform::from_yaw(0.02, Vector3::new(0.4, 0.05, 0.01));
    let second = first.transformed(&motion.inverse());

    let mut state = OdometryState::new(&config);
    register_scan(&mut state, first, &config).unwrap();
    let r = register_scan(&mut state, &second, &config).unwrap();
    assert!(!r.rejected);
    assert!((r.pose.translation - motion.translation).norm() < 1e-6);
    assert!((r.pose.rotation - motion.rotation).norm() < 1e-6);
}
