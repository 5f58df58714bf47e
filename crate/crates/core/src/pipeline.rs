//! End-to-end localization: combine scans, coarse-align the combined cloud
//! to the reference, refine every scan, then evaluate and export.
//!
//! Every stage reads its inputs from files and writes its outputs into the
//! run's output directory, so the stages can also be run one at a time.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::cloud::{PointCloud, RigidTransform, Trajectory};
use crate::error::{Error, Result};
use crate::evaluation::{error_histogram, evaluate_trajectory, PoseErrors, DEFAULT_XY_BIN_WIDTH};
use crate::fpfh::{compute_fpfh, FpfhDescriptor};
use crate::io::{read_ply, read_poses, write_ply, write_poses, PipelineConfig};
use crate::odometry::combine_scans;
use crate::parking::{detect_spaces, extract_class, update_occupancy, ParkingSpace};
use crate::registration::{
    icp_point_to_plane_with_target, ransac_coarse, IcpParams, PlaneTarget, RegistrationResult,
};
use crate::scene::{export_scene, read_spaces, write_spaces};
use crate::spatial::build_index;
use crate::synth::SyntheticScene;
use crate::voxel::{downsample, voxelize, VoxelGrid};

pub const COMBINED_FILE: &str = "combined.ply";
pub const VOXELS_FILE: &str = "reference_voxels.ply";
pub const ODOMETRY_FILE: &str = "odometry_poses.txt";
pub const COARSE_FILE: &str = "coarse_transform.txt";
pub const REFINED_FILE: &str = "refined_poses.txt";
pub const ERRORS_FILE: &str = "errors.csv";
pub const HISTOGRAM_XY_FILE: &str = "histogram_xy.csv";
pub const HISTOGRAM_Z_FILE: &str = "histogram_z.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const SPACES_FILE: &str = "spaces.json";
pub const SCENE_FILE: &str = "scene.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Z histogram bin width, meters.
pub const Z_BIN_WIDTH: f64 = 0.004;

/// XY error bound counted in the metrics summary, meters.
pub const XY_TARGET: f64 = 0.036;
/// Z error bound counted in the metrics summary, meters.
pub const Z_TARGET: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Input,
    Voxelize,
    Odometry,
    Coarse,
    Fine,
    Parking,
    Eval,
    ExportScene,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Input => "input",
            Stage::Voxelize => "voxelize",
            Stage::Odometry => "odometry",
            Stage::Coarse => "coarse",
            Stage::Fine => "fine",
            Stage::Parking => "parking",
            Stage::Eval => "eval",
            Stage::ExportScene => "export-scene",
            Stage::Output => "output",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl PipelineError {
    /// Short machine-readable status.
    pub fn status(&self) -> &'static str {
        match (self.stage, &self.source) {
            (_, Error::Config { .. }) => "config-error",
            (Stage::Input, _) => "input-error",
            (Stage::Output, _) => "output-error",
            _ => "stage-error",
        }
    }
}

pub type StageResult<T> = std::result::Result<T, PipelineError>;

trait AtStage<T> {
    fn at(self, stage: Stage) -> StageResult<T>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> StageResult<T> {
        self.map_err(|source| PipelineError { stage, source })
    }
}

/// Inputs and settings of a run. Stages that need an input that is not set
/// fail with an input error.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub config: PipelineConfig,
    pub seed: u64,
    pub reference: Option<PathBuf>,
    pub scans_dir: Option<PathBuf>,
    pub gt_poses: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl PipelineRun {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            config: PipelineConfig::default(),
            seed: 0,
            reference: None,
            scans_dir: None,
            gt_poses: None,
            out_dir: out_dir.into(),
        }
    }

    fn output(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn require<'a>(&self, path: &'a Option<PathBuf>, flag: &str) -> StageResult<&'a Path> {
        path.as_deref()
            .ok_or_else(|| Error::argument(format!("--{flag} is required")))
            .at(Stage::Input)
    }
}

/// Per-scan PLY files of `dir`, ordered by file name.
pub fn load_scans(dir: &Path) -> Result<Vec<PointCloud>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return Err(Error::argument(format!("no .ply scans in {}", dir.display())));
    }
    paths.sort();
    paths.iter().map(read_ply).collect()
}

/// Oriented cell means of a cloud's coarse grid with their FPFH descriptors.
pub fn coarse_features(cloud: &PointCloud, config: &PipelineConfig) -> Result<(PointCloud, Vec<FpfhDescriptor>)> {
    let grid = voxelize(cloud, config.voxel_size_coarse)?;
    let (means, normals) = grid.oriented_means();
    if means.len() < 3 {
        return Err(Error::DegenerateGeometry(
            "fewer than 3 coarse cells with normals".into(),
        ));
    }
    let index = build_index(&means)?;
    let normals: Vec<_> = normals.into_iter().map(Some).collect();
    let descriptors = compute_fpfh(&index, &normals, config.fpfh_radius)?;
    let mut points = Vec::with_capacity(means.len());
    let mut kept = Vec::with_capacity(means.len());
    for (p, d) in means.into_iter().zip(descriptors) {
        if let Some(d) = d {
            points.push(p);
            kept.push(d);
        }
    }
    Ok((PointCloud::from_points(points), kept))
}

/// RANSAC alignment of the combined cloud onto the reference, both reduced
/// to coarse cells (the reference through its fine-grid means).
pub fn coarse_register(
    reference_grid: &VoxelGrid,
    combined: &PointCloud,
    config: &PipelineConfig,
    seed: u64,
) -> Result<RegistrationResult> {
    let (target, target_desc) = coarse_features(&downsample(reference_grid), config)?;
    let (source, source_desc) = coarse_features(combined, config)?;
    ransac_coarse(&source, &target, &source_desc, &target_desc, config, seed)
}

/// Point-to-plane ICP of every scan, initialized at `coarse ∘ odometry[k]`.
pub fn refine_scans(
    target: &PlaneTarget,
    scans: &[PointCloud],
    odometry: &Trajectory,
    coarse: &RigidTransform,
    config: &PipelineConfig,
) -> Result<Vec<RegistrationResult>> {
    if scans.len() != odometry.len() {
        return Err(Error::argument(format!(
            "{} scans but {} odometry poses",
            scans.len(),
            odometry.len()
        )));
    }
    let params = IcpParams::from(config);
    scans
        .iter()
        .zip(&odometry.poses)
        .map(|(scan, pose)| {
            icp_point_to_plane_with_target(&scan.points, target, &coarse.compose(pose), &params)
        })
        .collect()
}

fn single_pose(path: &Path) -> Result<RigidTransform> {
    let t = read_poses(path)?;
    match t.poses.as_slice() {
        [only] => Ok(*only),
        _ => Err(Error::Data {
            index: 0,
            message: format!("{} must hold exactly one pose", path.display()),
        }),
    }
}

/// Files written by the current stage or run; removed again on failure.
#[derive(Debug, Default)]
struct Outputs {
    written: Vec<PathBuf>,
}

impl Outputs {
    fn track(&mut self, path: PathBuf) -> PathBuf {
        self.written.push(path.clone());
        path
    }

    fn names(&self) -> Vec<String> {
        self.written
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect()
    }

    fn discard(&self) {
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
    }
}

fn prepare_out_dir(run: &PipelineRun) -> StageResult<()> {
    fs::create_dir_all(&run.out_dir)
        .map_err(|e| Error::io(&run.out_dir, e))
        .at(Stage::Output)
}

fn read_reference(run: &PipelineRun) -> StageResult<PointCloud> {
    read_ply(run.require(&run.reference, "reference")?).at(Stage::Input)
}

fn read_scans(run: &PipelineRun) -> StageResult<Vec<PointCloud>> {
    load_scans(run.require(&run.scans_dir, "scans")?).at(Stage::Input)
}

fn read_intermediate_poses(run: &PipelineRun, name: &str) -> StageResult<Trajectory> {
    read_poses(run.output(name)).at(Stage::Input)
}

fn validate_config(run: &PipelineRun) -> StageResult<()> {
    run.config.validate().at(Stage::Input)
}

fn fine_grid(run: &PipelineRun, reference: &PointCloud) -> StageResult<VoxelGrid> {
    voxelize(reference, run.config.voxel_size_fine).at(Stage::Voxelize)
}

/// Writes the fine-grid cell means of the reference.
pub fn run_voxelize(run: &PipelineRun) -> StageResult<VoxelGrid> {
    validate_config(run)?;
    let reference = read_reference(run)?;
    let grid = fine_grid(run, &reference)?;
    prepare_out_dir(run)?;
    write_ply(&downsample(&grid), run.output(VOXELS_FILE), true).at(Stage::Output)?;
    Ok(grid)
}

/// Combines the scans; writes the combined cloud and the odometry poses.
pub fn run_odometry(run: &PipelineRun) -> StageResult<(PointCloud, Trajectory)> {
    validate_config(run)?;
    let scans = read_scans(run)?;
    let (combined, poses) = combine_scans(&scans, &run.config).at(Stage::Odometry)?;
    prepare_out_dir(run)?;
    write_ply(&combined, run.output(COMBINED_FILE), true).at(Stage::Output)?;
    write_poses(&poses, run.output(ODOMETRY_FILE)).at(Stage::Output)?;
    Ok((combined, poses))
}

/// Aligns the stored combined cloud to the reference; writes the transform.
pub fn run_coarse(run: &PipelineRun) -> StageResult<RegistrationResult> {
    validate_config(run)?;
    let reference = read_reference(run)?;
    let combined = read_ply(run.output(COMBINED_FILE)).at(Stage::Input)?;
    let grid = fine_grid(run, &reference)?;
    let result = coarse_register(&grid, &combined, &run.config, run.seed).at(Stage::Coarse)?;
    prepare_out_dir(run)?;
    write_poses(&Trajectory::new(vec![result.transform]), run.output(COARSE_FILE)).at(Stage::Output)?;
    Ok(result)
}

/// Refines every scan from the stored odometry and coarse transform.
pub fn run_fine(run: &PipelineRun) -> StageResult<Vec<RegistrationResult>> {
    validate_config(run)?;
    let reference = read_reference(run)?;
    let scans = read_scans(run)?;
    let odometry = read_intermediate_poses(run, ODOMETRY_FILE)?;
    let coarse = single_pose(&run.output(COARSE_FILE)).at(Stage::Input)?;
    let grid = fine_grid(run, &reference)?;
    let target = PlaneTarget::from_grid(&grid).at(Stage::Fine)?;
    let results = refine_scans(&target, &scans, &odometry, &coarse, &run.config).at(Stage::Fine)?;
    prepare_out_dir(run)?;
    let poses = Trajectory::new(results.iter().map(|r| r.transform).collect());
    write_poses(&poses, run.output(REFINED_FILE)).at(Stage::Output)?;
    Ok(results)
}

/// Spaces from the labeled reference, occupancy from the localized scans.
pub fn parking_spaces(
    reference: &PointCloud,
    scans: &[PointCloud],
    poses: &Trajectory,
    config: &PipelineConfig,
) -> Result<Vec<ParkingSpace>> {
    if scans.len() != poses.len() {
        return Err(Error::argument(format!(
            "{} scans but {} poses",
            scans.len(),
            poses.len()
        )));
    }
    let spaces = detect_spaces(
        reference,
        config.car_label,
        config.cluster_distance,
        config.cluster_min_points,
    )?;
    let mut cars = Vec::new();
    for (scan, pose) in scans.iter().zip(&poses.poses) {
        if scan.labels.is_none() {
            continue;
        }
        cars.extend(extract_class(scan, config.car_label)?.points.iter().map(|p| pose.apply(p)));
    }
    Ok(update_occupancy(&spaces, &cars, config.occupancy_min_points))
}

pub fn run_parking(run: &PipelineRun) -> StageResult<Vec<ParkingSpace>> {
    validate_config(run)?;
    let reference = read_reference(run)?;
    let scans = read_scans(run)?;
    let poses = read_intermediate_poses(run, REFINED_FILE)?;
    let spaces = parking_spaces(&reference, &scans, &poses, &run.config).at(Stage::Parking)?;
    prepare_out_dir(run)?;
    write_spaces(&spaces, run.output(SPACES_FILE)).at(Stage::Output)?;
    Ok(spaces)
}

/// Summary statistics of a trajectory evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub scan_count: usize,
    pub mean_xy_error: f64,
    pub max_xy_error: f64,
    pub mean_z_error: f64,
    pub max_z_error: f64,
    pub xy_below_target: usize,
    pub z_below_target: usize,
    pub xy_target: f64,
    pub z_target: f64,
}

impl Metrics {
    pub fn from_errors(e: &PoseErrors) -> Self {
        let n = e.len().max(1) as f64;
        Self {
            scan_count: e.len(),
            mean_xy_error: e.mean_xy(),
            max_xy_error: e.max_xy(),
            mean_z_error: e.z_error.iter().sum::<f64>() / n,
            max_z_error: e.z_error.iter().copied().fold(0.0, f64::max),
            xy_below_target: e.xy_error.iter().filter(|&&v| v < XY_TARGET).count(),
            z_below_target: e.z_error.iter().filter(|&&v| v < Z_TARGET).count(),
            xy_target: XY_TARGET,
            z_target: Z_TARGET,
        }
    }
}

fn write_text(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn write_evaluation(run: &PipelineRun, errors: &PoseErrors, outputs: &mut Outputs) -> StageResult<Metrics> {
    let xy = error_histogram(&errors.xy_error, DEFAULT_XY_BIN_WIDTH).at(Stage::Eval)?;
    let z = error_histogram(&errors.z_error, Z_BIN_WIDTH).at(Stage::Eval)?;
    let metrics = Metrics::from_errors(errors);
    write_text(outputs.track(run.output(ERRORS_FILE)), &errors.to_csv()).at(Stage::Output)?;
    write_text(outputs.track(run.output(HISTOGRAM_XY_FILE)), &xy.to_csv()).at(Stage::Output)?;
    write_text(outputs.track(run.output(HISTOGRAM_Z_FILE)), &z.to_csv()).at(Stage::Output)?;
    let json = serde_json::to_string_pretty(&metrics).expect("serializable metrics") + "\n";
    write_text(outputs.track(run.output(METRICS_FILE)), &json).at(Stage::Output)?;
    Ok(metrics)
}

/// Scores the stored refined poses against ground truth.
pub fn run_eval(run: &PipelineRun) -> StageResult<Metrics> {
    let gt = read_poses(run.require(&run.gt_poses, "gt-poses")?).at(Stage::Input)?;
    let estimated = read_intermediate_poses(run, REFINED_FILE)?;
    let errors = evaluate_trajectory(&estimated, &gt).at(Stage::Eval)?;
    prepare_out_dir(run)?;
    write_evaluation(run, &errors, &mut Outputs::default())
}

/// Writes the fine reference voxels with the stored parking spaces (if any).
pub fn run_export_scene(run: &PipelineRun) -> StageResult<()> {
    validate_config(run)?;
    let reference = read_reference(run)?;
    let spaces_path = run.output(SPACES_FILE);
    let spaces = if spaces_path.exists() {
        read_spaces(&spaces_path).at(Stage::Input)?
    } else {
        Vec::new()
    };
    let grid = fine_grid(run, &reference)?;
    prepare_out_dir(run)?;
    export_scene(&grid, &spaces, run.output(SCENE_FILE)).at(Stage::ExportScene)
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    config_hash: String,
    seed: u64,
    config: &'a PipelineConfig,
    scan_count: usize,
    coarse_fitness: f64,
    coarse_inlier_rmse: f64,
    coarse_iterations: usize,
    outputs: Vec<String>,
}

/// What a completed run produced.
#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub odometry: Trajectory,
    pub coarse: RegistrationResult,
    pub fine: Vec<RegistrationResult>,
    pub refined: Trajectory,
    pub metrics: Option<Metrics>,
    pub spaces: Vec<ParkingSpace>,
    pub outputs: Vec<PathBuf>,
}

/// Runs every stage; on failure removes whatever this run wrote.
pub fn run_pipeline(run: &PipelineRun) -> StageResult<PipelineSummary> {
    let mut outputs = Outputs::default();
    let created_dir = !run.out_dir.exists();
    let result = pipeline_stages(run, &mut outputs);
    if result.is_err() {
        outputs.discard();
        if created_dir {
            let _ = fs::remove_dir(&run.out_dir);
        }
    }
    result
}

fn pipeline_stages(run: &PipelineRun, outputs: &mut Outputs) -> StageResult<PipelineSummary> {
    validate_config(run)?;
    let config = &run.config;
    let reference = read_reference(run)?;
    let scans = read_scans(run)?;
    let gt = match &run.gt_poses {
        Some(p) => Some(read_poses(p).at(Stage::Input)?),
        None => None,
    };

    let grid = fine_grid(run, &reference)?;
    let (combined, odometry) = combine_scans(&scans, config).at(Stage::Odometry)?;
    let coarse = coarse_register(&grid, &combined, config, run.seed).at(Stage::Coarse)?;
    let target = PlaneTarget::from_grid(&grid).at(Stage::Fine)?;
    let fine = refine_scans(&target, &scans, &odometry, &coarse.transform, config).at(Stage::Fine)?;
    let refined = Trajectory::new(fine.iter().map(|r| r.transform).collect());

    let errors = match &gt {
        Some(gt) => Some(evaluate_trajectory(&refined, gt).at(Stage::Eval)?),
        None => None,
    };
    let spaces = if reference.labels.is_some() {
        parking_spaces(&reference, &scans, &refined, config).at(Stage::Parking)?
    } else {
        Vec::new()
    };

    prepare_out_dir(run)?;
    write_ply(&combined, outputs.track(run.output(COMBINED_FILE)), true).at(Stage::Output)?;
    write_poses(&odometry, outputs.track(run.output(ODOMETRY_FILE))).at(Stage::Output)?;
    write_poses(
        &Trajectory::new(vec![coarse.transform]),
        outputs.track(run.output(COARSE_FILE)),
    )
    .at(Stage::Output)?;
    write_poses(&refined, outputs.track(run.output(REFINED_FILE))).at(Stage::Output)?;
    let metrics = match &errors {
        Some(e) => Some(write_evaluation(run, e, outputs)?),
        None => None,
    };
    if reference.labels.is_some() {
        write_spaces(&spaces, outputs.track(run.output(SPACES_FILE))).at(Stage::Output)?;
    }
    export_scene(&grid, &spaces, outputs.track(run.output(SCENE_FILE))).at(Stage::ExportScene)?;

    let manifest_path = outputs.track(run.output(MANIFEST_FILE));
    let manifest = Manifest {
        config_hash: config.hash(),
        seed: run.seed,
        config,
        scan_count: scans.len(),
        coarse_fitness: coarse.fitness,
        coarse_inlier_rmse: coarse.inlier_rmse,
        coarse_iterations: coarse.iterations,
        outputs: outputs.names(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("serializable manifest") + "\n";
    write_text(manifest_path, &json).at(Stage::Output)?;

    Ok(PipelineSummary {
        odometry,
        coarse,
        fine,
        refined,
        metrics,
        spaces,
        outputs: outputs.written.clone(),
    })
}

/// Writes `reference.ply`, `scans/scan_NNN.ply` and `gt_poses.txt` under `dir`.
pub fn write_synthetic_dataset(scene: &SyntheticScene, dir: &Path) -> Result<()> {
    let scans_dir = dir.join("scans");
    fs::create_dir_all(&scans_dir).map_err(|e| Error::io(&scans_dir, e))?;
    write_ply(&scene.reference, dir.join("reference.ply"), true)?;
    for (k, scan) in scene.scans.iter().enumerate() {
        write_ply(scan, scans_dir.join(format!("scan_{k:03}.ply")), true)?;
    }
    write_poses(&scene.ground_truth, dir.join("gt_poses.txt"))
}
