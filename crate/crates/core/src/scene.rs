//! JSON scene and parking-space files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parking::ParkingSpace;
use crate::voxel::VoxelGrid;

/// Color given to voxels whose points carry none.
pub const DEFAULT_VOXEL_COLOR: [u8; 3] = [128, 128, 128];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneVoxel {
    pub key: [i64; 3],
    pub center: [f64; 3],
    pub color: [u8; 3],
}

/// Document written by [`export_scene`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDocument {
    pub voxel_size: f64,
    pub voxels: Vec<SceneVoxel>,
    pub boxes: Vec<ParkingSpace>,
}

impl SceneDocument {
    pub fn new(grid: &VoxelGrid, spaces: &[ParkingSpace]) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::argument("scene grid is empty"));
        }
        let s = grid.voxel_size;
        let voxels = grid
            .cells
            .iter()
            .map(|(k, cell)| SceneVoxel {
                key: [k.ix, k.iy, k.iz],
                center: [
                    k.ix as f64 * s + s / 2.0,
                    k.iy as f64 * s + s / 2.0,
                    k.iz as f64 * s + s / 2.0,
                ],
                color: cell.color.unwrap_or(DEFAULT_VOXEL_COLOR),
            })
            .collect();
        Ok(Self {
            voxel_size: s,
            voxels,
            boxes: spaces.to_vec(),
        })
    }

    /// Structural checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size.is_finite() && self.voxel_size > 0.0) {
            return Err(Error::argument("voxel_size must be positive"));
        }
        for (i, v) in self.voxels.iter().enumerate() {
            for axis in 0..3 {
                let expected = v.key[axis] as f64 * self.voxel_size + self.voxel_size / 2.0;
                if (v.center[axis] - expected).abs() > 1e-9 * expected.abs().max(1.0) {
                    return Err(Error::Data {
                        index: i,
                        message: "voxel center does not match its key".into(),
                    });
                }
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if b.bbox.dims.iter().any(|d| !(*d > 0.0)) || !(0.0..std::f64::consts::PI).contains(&b.bbox.yaw) {
                return Err(Error::Data {
                    index: i,
                    message: "box dims must be positive and yaw in [0, pi)".into(),
                });
            }
        }
        Ok(())
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path, pretty: bool) -> Result<()> {
    let text = if pretty {
        serde_json::to_string_pretty(value)
    } else {
        serde_json::to_string(value)
    }
    .expect("serializable document");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}

/// Writes voxels (center = key * s + s / 2) and parking boxes as JSON.
pub fn export_scene(grid: &VoxelGrid, spaces: &[ParkingSpace], path: impl AsRef<Path>) -> Result<()> {
    write_json(&SceneDocument::new(grid, spaces)?, path.as_ref(), false)
}

pub fn read_scene(path: impl AsRef<Path>) -> Result<SceneDocument> {
    let doc: SceneDocument = read_json(path.as_ref())?;
    doc.validate()?;
    Ok(doc)
}

pub fn write_spaces(spaces: &[ParkingSpace], path: impl AsRef<Path>) -> Result<()> {
    write_json(&spaces, path.as_ref(), true)
}

pub fn read_spaces(path: impl AsRef<Path>) -> Result<Vec<ParkingSpace>> {
    read_json(path.as_ref())
}
