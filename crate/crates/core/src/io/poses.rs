//! Pose files: one transform per line, 12 whitespace-separated numbers forming
//! the row-major 3x4 matrix `[R | t]`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::cloud::{RigidTransform, Trajectory, ROTATION_TOLERANCE};
use crate::error::{Error, Result};

/// Rotations drifting beyond this are rejected rather than repaired.
pub const MAX_ROTATION_DRIFT: f64 = 1e-6;

pub fn read_poses(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text)
}

pub fn parse_poses(text: &str) -> Result<Trajectory> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("invalid number `{t}`"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let values: [f64; 12] = values.try_into().map_err(|v: Vec<f64>| Error::Parse {
            line: line_no,
            message: format!("expected 12 numbers, found {}", v.len()),
        })?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data {
                index: poses.len(),
                message: format!("non-finite value on line {line_no}"),
            });
        }
        let pose = RigidTransform::from_row_major_unchecked(&values);
        let det_error = (pose.rotation.determinant() - 1.0).abs();
        let ortho_error = pose.orthonormality_error();
        if det_error > MAX_ROTATION_DRIFT || ortho_error > MAX_ROTATION_DRIFT {
            return Err(Error::Data {
                index: poses.len(),
                message: format!(
                    "rotation on line {line_no} is not a rotation (|det - 1| = {det_error:.3e}, \
                     ||RtR - I|| = {ortho_error:.3e})"
                ),
            });
        }
        let pose = if det_error > ROTATION_TOLERANCE || ortho_error > ROTATION_TOLERANCE {
            pose.orthonormalized()
        } else {
            pose
        };
        poses.push(pose);
    }
    Ok(Trajectory::new(poses))
}

pub fn write_poses(trajectory: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_poses(trajectory)).map_err(|e| Error::io(path, e))
}

/// Formats with 17 significant digits, enough to recover every f64 exactly.
pub fn format_poses(trajectory: &Trajectory) -> String {
    let mut out = String::new();
    for pose in &trajectory.poses {
        let row = pose.to_row_major();
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{v:.16e}").unwrap();
        }
        out.push('\n');
    }
    out
}
