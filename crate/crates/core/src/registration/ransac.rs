use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{estimate_rigid, evaluate_alignment, RegistrationResult};
use crate::cloud::{Point3, PointCloud, RigidTransform};
use crate::error::{Error, Result};
use crate::fpfh::{FpfhDescriptor, DESCRIPTOR_LEN};
use crate::io::PipelineConfig;
use crate::spatial::{build_index, KdTree, SpatialIndex};

/// A putative match between a source and a target point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source_index: usize,
    pub target_index: usize,
    /// Descriptor-space or metric distance, depending on the producer.
    pub distance: f64,
}

/// Nearest target descriptor (Euclidean, ties to the lower index) for every
/// source descriptor.
pub fn match_fpfh(
    source_desc: &[FpfhDescriptor],
    target_desc: &[FpfhDescriptor],
) -> Result<Vec<Correspondence>> {
    if source_desc.is_empty() || target_desc.is_empty() {
        return Err(Error::argument("descriptor sets must be non-empty"));
    }
    let tree: KdTree<DESCRIPTOR_LEN> =
        KdTree::build(target_desc.iter().map(|d| d.bins).collect())?;
    Ok(source_desc
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let hit = tree.nearest(&d.bins).expect("non-empty tree");
            Correspondence {
                source_index: i,
                target_index: hit.index,
                distance: hit.distance,
            }
        })
        .collect())
}

/// RANSAC settings, usually taken from [`PipelineConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub distance_threshold: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub edge_tolerance: f64,
}

impl From<&PipelineConfig> for RansacParams {
    fn from(c: &PipelineConfig) -> Self {
        Self {
            distance_threshold: c.ransac_distance_threshold,
            max_iterations: c.ransac_max_iterations,
            confidence: c.ransac_confidence,
            edge_tolerance: c.ransac_edge_tolerance,
        }
    }
}

const SAMPLE_SIZE: usize = 3;

/// Iterations evaluated per parallel batch. The reduction walks each batch in
/// iteration order, so the result is independent of the worker count.
const BATCH: usize = 16;

#[derive(Debug, Clone, Copy)]
struct Hypothesis {
    transform: RigidTransform,
    fitness: f64,
    rmse: f64,
}

impl Hypothesis {
    fn beats(&self, other: &Hypothesis) -> bool {
        self.fitness > other.fitness || (self.fitness == other.fitness && self.rmse < other.rmse)
    }
}

/// Coarse alignment of `source` onto `target` from FPFH matches.
///
/// Each iteration draws three distinct source points, takes their descriptor
/// matches, rejects the sample unless every source edge length is within
/// `edge_tolerance` of the matched target edge, fits a rigid transform and
/// scores it over the whole source cloud with [`evaluate_alignment`]. The
/// best hypothesis (highest fitness, then lowest RMSE) wins; the loop stops
/// once `1 - (1 - fitness^3)^iterations` reaches the confidence.
pub fn ransac_coarse(
    source: &PointCloud,
    target: &PointCloud,
    source_desc: &[FpfhDescriptor],
    target_desc: &[FpfhDescriptor],
    config: &PipelineConfig,
    seed: u64,
) -> Result<RegistrationResult> {
    let params = RansacParams::from(config);
    if source.len() < SAMPLE_SIZE || target.len() < SAMPLE_SIZE {
        return Err(Error::argument("RANSAC needs at least 3 points per cloud"));
    }
    if source_desc.len() != source.len() || target_desc.len() != target.len() {
        return Err(Error::argument("descriptors must align with points"));
    }
    let matches = match_fpfh(source_desc, target_desc)?;
    let target_index = build_index(&target.points)?;
    ransac_with_matches(
        &source.points,
        &target.points,
        &target_index,
        &matches,
        &params,
        seed,
    )
}

pub(crate) fn ransac_with_matches(
    source: &[Point3],
    target: &[Point3],
    target_index: &SpatialIndex,
    matches: &[Correspondence],
    params: &RansacParams,
    seed: u64,
) -> Result<RegistrationResult> {
    let mut best: Option<Hypothesis> = None;
    let mut iterations = 0usize;
    let mut scored = 0usize;
    let mut done = false;

    while !done && iterations < params.max_iterations {
        let batch_end = (iterations + BATCH).min(params.max_iterations);
        let hypotheses: Vec<Option<Hypothesis>> = (iterations..batch_end)
            .into_par_iter()
            .map(|it| {
                hypothesize(source, target, target_index, matches, params, seed, it as u64)
            })
            .collect();
        for hypothesis in hypotheses {
            iterations += 1;
            let Some(h) = hypothesis else { continue };
            scored += 1;
            if best.is_none_or(|b| h.beats(&b)) {
                best = Some(h);
            }
            if let Some(b) = &best {
                let miss = 1.0 - b.fitness.powi(SAMPLE_SIZE as i32);
                if 1.0 - miss.powi(scored as i32) >= params.confidence {
                    done = true;
                    break;
                }
            }
        }
    }

    Ok(match best {
        Some(b) => RegistrationResult {
            transform: b.transform,
            fitness: b.fitness,
            inlier_rmse: b.rmse,
            iterations,
            converged: true,
            rmse_history: Vec::new(),
        },
        None => RegistrationResult {
            transform: RigidTransform::identity(),
            fitness: 0.0,
            inlier_rmse: 0.0,
            iterations,
            converged: false,
            rmse_history: Vec::new(),
        },
    })
}

fn hypothesize(
    source: &[Point3],
    target: &[Point3],
    target_index: &SpatialIndex,
    matches: &[Correspondence],
    params: &RansacParams,
    seed: u64,
    iteration: u64,
) -> Option<Hypothesis> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    let picks = sample(&mut rng, matches.len(), SAMPLE_SIZE);
    let chosen: Vec<&Correspondence> = picks.iter().map(|i| &matches[i]).collect();

    for a in 0..SAMPLE_SIZE {
        for b in a + 1..SAMPLE_SIZE {
            let ds = (source[chosen[a].source_index] - source[chosen[b].source_index]).norm();
            let dt = (target[chosen[a].target_index] - target[chosen[b].target_index]).norm();
            if dt == 0.0 || (ds - dt).abs() > params.edge_tolerance * dt {
                return None;
            }
        }
    }

    let src: Vec<Point3> = chosen.iter().map(|c| source[c.source_index]).collect();
    let dst: Vec<Point3> = chosen.iter().map(|c| target[c.target_index]).collect();
    let transform = estimate_rigid(&src, &dst).ok()?;
    let (fitness, rmse) =
        evaluate_alignment(source, target_index, &transform, params.distance_threshold);
    (fitness > 0.0).then_some(Hypothesis {
        transform,
        fitness,
        rmse,
    })
}
