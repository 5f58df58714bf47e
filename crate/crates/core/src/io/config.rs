//! Flat JSON pipeline configuration with strict key checking.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Every tunable of the pipeline. Lengths are meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub voxel_size_fine: f64,
    pub voxel_size_coarse: f64,
    pub fpfh_radius: f64,
    pub ransac_distance_threshold: f64,
    pub ransac_max_iterations: usize,
    pub ransac_confidence: f64,
    /// Relative tolerance of the RANSAC edge-length pre-check.
    pub ransac_edge_tolerance: f64,
    pub icp_max_correspondence_distance: f64,
    pub icp_max_iterations: usize,
    pub icp_convergence_eps: f64,
    pub cluster_distance: f64,
    pub cluster_min_points: usize,
    pub occupancy_min_points: usize,
    pub car_label: u32,
    /// Sub-sampling voxel for scan-to-map odometry.
    pub odometry_voxel_size: f64,
    /// Correspondence distance used before the adaptive threshold has history.
    pub odometry_initial_threshold: f64,
    pub odometry_max_points_per_voxel: usize,
    /// Map cells farther than this from the current pose are evicted.
    pub local_map_radius: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            voxel_size_fine: 0.10,
            voxel_size_coarse: 1.0,
            fpfh_radius: 5.0,
            ransac_distance_threshold: 2.0,
            ransac_max_iterations: 100_000,
            ransac_confidence: 0.999,
            ransac_edge_tolerance: 0.1,
            icp_max_correspondence_distance: 0.5,
            icp_max_iterations: 50,
            icp_convergence_eps: 1e-6,
            cluster_distance: 0.5,
            cluster_min_points: 30,
            occupancy_min_points: 10,
            car_label: 2,
            odometry_voxel_size: 0.5,
            odometry_initial_threshold: 2.0,
            odometry_max_points_per_voxel: 20,
            local_map_radius: 100.0,
        }
    }
}

const FPFH_RADIUS_PER_COARSE_VOXEL: f64 = 5.0;

impl PipelineConfig {
    /// Checks every documented invariant, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let lengths = [
            ("voxel_size_fine", self.voxel_size_fine),
            ("voxel_size_coarse", self.voxel_size_coarse),
            ("fpfh_radius", self.fpfh_radius),
            ("ransac_distance_threshold", self.ransac_distance_threshold),
            (
                "icp_max_correspondence_distance",
                self.icp_max_correspondence_distance,
            ),
            ("icp_convergence_eps", self.icp_convergence_eps),
            ("cluster_distance", self.cluster_distance),
            ("odometry_voxel_size", self.odometry_voxel_size),
            ("odometry_initial_threshold", self.odometry_initial_threshold),
            ("local_map_radius", self.local_map_radius),
        ];
        for (field, value) in lengths {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::config(field, "must be finite and > 0"));
            }
        }
        let counts = [
            ("ransac_max_iterations", self.ransac_max_iterations),
            ("icp_max_iterations", self.icp_max_iterations),
            ("cluster_min_points", self.cluster_min_points),
            ("occupancy_min_points", self.occupancy_min_points),
            (
                "odometry_max_points_per_voxel",
                self.odometry_max_points_per_voxel,
            ),
        ];
        for (field, value) in counts {
            if value == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.voxel_size_coarse < self.voxel_size_fine {
            return Err(Error::config(
                "voxel_size_coarse",
                "must be >= voxel_size_fine",
            ));
        }
        if !(self.ransac_confidence > 0.0 && self.ransac_confidence < 1.0) {
            return Err(Error::config("ransac_confidence", "must lie in (0, 1)"));
        }
        if !(self.ransac_edge_tolerance >= 0.0 && self.ransac_edge_tolerance < 1.0) {
            return Err(Error::config("ransac_edge_tolerance", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form; recorded in run manifests.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<PipelineConfig> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    let Value::Object(map) = value else {
        return Err(Error::config("<root>", "expected a JSON object"));
    };
    config_from_map(&map)
}

fn config_from_map(map: &Map<String, Value>) -> Result<PipelineConfig> {
    let mut c = PipelineConfig::default();
    let mut fpfh_radius = None;
    for (key, value) in map {
        match key.as_str() {
            "voxel_size_fine" => c.voxel_size_fine = real(key, value)?,
            "voxel_size_coarse" => c.voxel_size_coarse = real(key, value)?,
            "fpfh_radius" => fpfh_radius = Some(real(key, value)?),
            "ransac_distance_threshold" => c.ransac_distance_threshold = real(key, value)?,
            "ransac_max_iterations" => c.ransac_max_iterations = count(key, value)?,
            "ransac_confidence" => c.ransac_confidence = real(key, value)?,
            "ransac_edge_tolerance" => c.ransac_edge_tolerance = real(key, value)?,
            "icp_max_correspondence_distance" => {
                c.icp_max_correspondence_distance = real(key, value)?
            }
            "icp_max_iterations" => c.icp_max_iterations = count(key, value)?,
            "icp_convergence_eps" => c.icp_convergence_eps = real(key, value)?,
            "cluster_distance" => c.cluster_distance = real(key, value)?,
            "cluster_min_points" => c.cluster_min_points = count(key, value)?,
            "occupancy_min_points" => c.occupancy_min_points = count(key, value)?,
            "car_label" => {
                c.car_label = u32::try_from(count(key, value)?)
                    .map_err(|_| Error::config(key, "does not fit u32"))?
            }
            "odometry_voxel_size" => c.odometry_voxel_size = real(key, value)?,
            "odometry_initial_threshold" => c.odometry_initial_threshold = real(key, value)?,
            "odometry_max_points_per_voxel" => {
                c.odometry_max_points_per_voxel = count(key, value)?
            }
            "local_map_radius" => c.local_map_radius = real(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
    }
    c.fpfh_radius = fpfh_radius.unwrap_or(FPFH_RADIUS_PER_COARSE_VOXEL * c.voxel_size_coarse);
    c.validate()?;
    Ok(c)
}

fn real(key: &str, value: &Value) -> Result<f64> {
    value
        .as_f64()
        .ok_or_else(|| Error::config(key, "expected a number"))
}

fn count(key: &str, value: &Value) -> Result<usize> {
    value
        .as_u64()
        .and_then(|v| usize::try_from(v).ok())
        .ok_or_else(|| Error::config(key, "expected a non-negative integer"))
}
