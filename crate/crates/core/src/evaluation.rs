//! Positional error statistics of an estimated trajectory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::cloud::Trajectory;
use crate::error::{Error, Result};

/// Default XY histogram bin width in meters.
pub const DEFAULT_XY_BIN_WIDTH: f64 = 0.006;

/// Per-scan planar and vertical position errors, meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseErrors {
    pub xy_error: Vec<f64>,
    pub z_error: Vec<f64>,
}

impl PoseErrors {
    pub fn len(&self) -> usize {
        self.xy_error.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xy_error.is_empty()
    }

    pub fn max_xy(&self) -> f64 {
        self.xy_error.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean_xy(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.xy_error.iter().sum::<f64>() / self.len() as f64
    }

    /// CSV with header `scan_index,xy_error,z_error`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scan_index,xy_error,z_error\n");
        for (i, (xy, z)) in self.xy_error.iter().zip(&self.z_error).enumerate() {
            writeln!(out, "{i},{xy},{z}").unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorHistogram {
    /// `counts.len() + 1` ascending edges starting at 0.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl ErrorHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// CSV with header `bin_lo,bin_hi,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(out, "{},{},{}", self.bin_edges[i], self.bin_edges[i + 1], c).unwrap();
        }
        out
    }
}

pub fn evaluate_trajectory(estimated: &Trajectory, ground_truth: &Trajectory) -> Result<PoseErrors> {
    if estimated.len() != ground_truth.len() {
        return Err(Error::argument(format!(
            "{} estimated poses vs {} ground-truth poses",
            estimated.len(),
            ground_truth.len()
        )));
    }
    if estimated.is_empty() {
        return Err(Error::argument("trajectories are empty"));
    }
    let (xy_error, z_error) = estimated
        .poses
        .iter()
        .zip(&ground_truth.poses)
        .map(|(e, g)| {
            let d = e.translation - g.translation;
            (d.x.hypot(d.y), d.z.abs())
        })
        .unzip();
    Ok(PoseErrors { xy_error, z_error })
}

/// Uniform bins `[k w, (k+1) w)` from 0 up to the largest error; the last
/// bin also includes its upper edge.
pub fn error_histogram(errors: &[f64], bin_width: f64) -> Result<ErrorHistogram> {
    if !(bin_width.is_finite() && bin_width > 0.0) {
        return Err(Error::argument("bin width must be positive"));
    }
    if let Some(bad) = errors.iter().position(|e| !(e.is_finite() && *e >= 0.0)) {
        return Err(Error::Data {
            index: bad,
            message: "errors must be finite and non-negative".into(),
        });
    }
    let max = errors.iter().copied().fold(0.0, f64::max);
    let nbins = ((max / bin_width).ceil() as usize).max(1);
    let mut bin_edges: Vec<f64> = (0..=nbins).map(|k| k as f64 * bin_width).collect();
    // Rounding in k * w may leave the top edge just under the maximum.
    if bin_edges[nbins] < max {
        bin_edges[nbins] = max;
    }
    let mut counts = vec![0; nbins];
    for &e in errors {
        let mut bin = ((e / bin_width).floor() as usize).min(nbins - 1);
        while bin > 0 && e < bin_edges[bin] {
            bin -= 1;
        }
        while bin + 1 < nbins && e >= bin_edges[bin + 1] {
            bin += 1;
        }
        counts[bin] += 1;
    }
    Ok(ErrorHistogram { bin_edges, counts })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_errors_csv(errors: &PoseErrors, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &errors.to_csv())
}

pub fn write_histogram_csv(histogram: &ErrorHistogram, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &histogram.to_csv())
}
