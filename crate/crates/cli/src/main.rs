use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use voxloc::io::{parse_config, PipelineConfig};
use voxloc::pipeline::{self, PipelineError, PipelineRun, Stage};
use voxloc::synth::{generate_synthetic_scene, SceneSpec};

#[derive(Parser, Debug)]
#[command(name = "voxloc", version, about = "Voxel-based LiDAR scan localization against a reference map")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Reference cloud (PLY).
    #[arg(long, global = true)]
    reference: Option<PathBuf>,
    /// Directory of per-scan PLY files, processed in file-name order.
    #[arg(long, global = true)]
    scans: Option<PathBuf>,
    /// Ground-truth pose file, one 3x4 row-major pose per scan.
    #[arg(long, global = true)]
    gt_poses: Option<PathBuf>,
    /// Directory for outputs and stage intermediates.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Voxelize the reference and write its cell means.
    Voxelize,
    /// Combine the scans with odometry.
    Odometry,
    /// Coarse-align the combined cloud to the reference.
    Coarse,
    /// Refine every scan against the reference voxels.
    Fine,
    /// Run every stage.
    Pipeline,
    /// Detect parking spaces and their occupancy.
    Parking,
    /// Score refined poses against ground truth.
    Eval,
    /// Write the voxel and parking-space scene file.
    ExportScene,
    /// Generate a synthetic street dataset into the output directory.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    scan_count: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    points_per_scan: Option<usize>,
    #[arg(long)]
    vacated_cars: Option<usize>,
}

fn fail(e: &PipelineError) -> ExitCode {
    eprintln!("error[{}]: {e}", e.status());
    ExitCode::from(match e.status() {
        "input-error" => 2,
        "config-error" => 3,
        "output-error" => 4,
        _ => 1,
    })
}

fn load_config(path: &Option<PathBuf>) -> Result<PipelineConfig, PipelineError> {
    match path {
        Some(p) => parse_config(p).map_err(|source| PipelineError {
            stage: Stage::Input,
            source,
        }),
        None => Ok(PipelineConfig::default()),
    }
}

fn synth(common: &Common, args: &SynthArgs) -> Result<(), PipelineError> {
    let defaults = SceneSpec::default();
    let spec = SceneSpec {
        scan_count: args.scan_count.unwrap_or(defaults.scan_count),
        noise_sigma: args.noise_sigma.unwrap_or(defaults.noise_sigma),
        points_per_scan: args.points_per_scan.unwrap_or(defaults.points_per_scan),
        vacated_cars: args.vacated_cars.unwrap_or(defaults.vacated_cars),
        ..defaults
    };
    let scene = generate_synthetic_scene(common.seed, &spec).map_err(|source| PipelineError {
        stage: Stage::Input,
        source,
    })?;
    pipeline::write_synthetic_dataset(&scene, &common.out_dir).map_err(|source| PipelineError {
        stage: Stage::Output,
        source,
    })?;
    println!(
        "wrote {} reference points and {} scans to {}",
        scene.reference.len(),
        scene.scans.len(),
        common.out_dir.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let c = &cli.common;
    if let Command::Synth(args) = &cli.command {
        return synth(c, args);
    }
    let run = PipelineRun {
        config: load_config(&c.config)?,
        seed: c.seed,
        reference: c.reference.clone(),
        scans_dir: c.scans.clone(),
        gt_poses: c.gt_poses.clone(),
        out_dir: c.out_dir.clone(),
    };
    match &cli.command {
        Command::Voxelize => {
            let grid = pipeline::run_voxelize(&run)?;
            println!("{} cells at {} m", grid.len(), grid.voxel_size);
        }
        Command::Odometry => {
            let (combined, poses) = pipeline::run_odometry(&run)?;
            println!("{} scans combined into {} points", poses.len(), combined.len());
        }
        Command::Coarse => {
            let r = pipeline::run_coarse(&run)?;
            println!(
                "fitness {:.4} inlier_rmse {:.4} iterations {}",
                r.fitness, r.inlier_rmse, r.iterations
            );
        }
        Command::Fine => {
            let results = pipeline::run_fine(&run)?;
            let converged = results.iter().filter(|r| r.converged).count();
            println!("{} scans refined, {} converged", results.len(), converged);
        }
        Command::Pipeline => {
            let summary = pipeline::run_pipeline(&run)?;
            println!(
                "{} scans localized (coarse fitness {:.4})",
                summary.refined.len(),
                summary.coarse.fitness
            );
            if let Some(m) = &summary.metrics {
                println!(
                    "mean xy error {:.4} m, max {:.4} m, {}/{} below {} m",
                    m.mean_xy_error, m.max_xy_error, m.xy_below_target, m.scan_count, m.xy_target
                );
            }
        }
        Command::Parking => {
            let spaces = pipeline::run_parking(&run)?;
            let vacant = spaces
                .iter()
                .filter(|s| s.state == voxloc::parking::OccupancyState::Vacant)
                .count();
            println!("{} spaces, {} vacant", spaces.len(), vacant);
        }
        Command::Eval => {
            let m = pipeline::run_eval(&run)?;
            println!(
                "mean xy error {:.4} m, max {:.4} m, max z error {:.4} m",
                m.mean_xy_error, m.max_xy_error, m.max_z_error
            );
        }
        Command::ExportScene => pipeline::run_export_scene(&run)?,
        Command::Synth(_) => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error[input-error]: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
