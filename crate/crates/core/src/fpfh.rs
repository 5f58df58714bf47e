//! Fast Point Feature Histograms.
//!
//! For every ordered pair of oriented points a Darboux frame `(u, v, w)` is
//! built at the source point and three angular features are measured. The
//! simplified histogram (SPFH) bins those features over a radius
//! neighborhood; the FPFH adds distance-weighted SPFHs of the neighbors.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::cloud::Point3;
use crate::error::{Error, Result};
use crate::spatial::SpatialIndex;

pub const BINS_PER_FEATURE: usize = 11;
pub const DESCRIPTOR_LEN: usize = 3 * BINS_PER_FEATURE;

const UNIT_NORMAL_TOLERANCE: f64 = 1e-6;
const DEGENERATE_FRAME_EPS: f64 = 1e-9;

/// Angular features of one point pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairAngles {
    /// `v · n_t`, in [-1, 1].
    pub alpha: f64,
    /// `u · d / |d|`, in [-1, 1].
    pub phi: f64,
    /// `atan2(w · n_t, u · n_t)`, in (-π, π].
    pub theta: f64,
    /// The frame was built at `p_j` instead of `p_i`.
    pub swapped: bool,
}

/// Features of the pair `(p_i, n_i)`, `(p_j, n_j)`.
///
/// The frame is anchored at the point whose normal makes the smaller angle
/// cosine with the connecting line; `v` is normalized so that `alpha` stays a
/// cosine.
pub fn pair_angles(
    p_i: &Point3,
    n_i: &Vector3<f64>,
    p_j: &Point3,
    n_j: &Vector3<f64>,
) -> Result<PairAngles> {
    for n in [n_i, n_j] {
        if (n.norm() - 1.0).abs() > UNIT_NORMAL_TOLERANCE {
            return Err(Error::argument("pair normals must be unit length"));
        }
    }
    let d = p_j - p_i;
    let len = d.norm();
    if len == 0.0 {
        return Err(Error::argument("pair points coincide"));
    }
    let mut dir = d / len;
    let (mut n_s, mut n_t) = (n_i, n_j);
    let swapped = n_i.dot(&dir).abs() > n_j.dot(&dir).abs();
    if swapped {
        std::mem::swap(&mut n_s, &mut n_t);
        dir = -dir;
    }
    let u = *n_s;
    let v = dir.cross(&u);
    let v_norm = v.norm();
    if v_norm < DEGENERATE_FRAME_EPS {
        return Err(Error::DegenerateGeometry(
            "connecting line parallel to the source normal".into(),
        ));
    }
    let v = v / v_norm;
    let w = u.cross(&v);
    let alpha = v.dot(n_t).clamp(-1.0, 1.0);
    let phi = u.dot(&dir).clamp(-1.0, 1.0);
    let mut theta = w.dot(n_t).atan2(u.dot(n_t));
    if theta <= -std::f64::consts::PI {
        theta = std::f64::consts::PI;
    }
    Ok(PairAngles {
        alpha,
        phi,
        theta,
        swapped,
    })
}

/// Uniform bin of `value` over `[lo, hi]`, clamped to the valid range.
fn bin_of(value: f64, lo: f64, hi: f64) -> usize {
    let b = ((value - lo) / (hi - lo) * BINS_PER_FEATURE as f64).floor();
    (b.max(0.0) as usize).min(BINS_PER_FEATURE - 1)
}

/// Bin indices (within each 11-bin block) of the three features.
pub fn feature_bins(angles: &PairAngles) -> [usize; 3] {
    use std::f64::consts::PI;
    [
        bin_of(angles.alpha, -1.0, 1.0),
        bin_of(angles.phi, -1.0, 1.0),
        bin_of(angles.theta, -PI, PI),
    ]
}

/// SPFH: three concatenated, individually normalized 11-bin histograms
/// (alpha, phi, theta).
#[derive(Debug, Clone, PartialEq)]
pub struct SpfhHistogram {
    pub bins: [f64; DESCRIPTOR_LEN],
    /// Pairs contributing to the histogram.
    pub pairs: usize,
    /// Neighbors skipped: coincident, degenerate frame, or lacking a normal.
    pub skipped: usize,
}

/// 33-bin FPFH descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct FpfhDescriptor {
    pub bins: [f64; DESCRIPTOR_LEN],
}

impl FpfhDescriptor {
    pub fn as_array(&self) -> &[f64; DESCRIPTOR_LEN] {
        &self.bins
    }
}

fn check_lengths(index: &SpatialIndex, len: usize, what: &str) -> Result<()> {
    if len != index.len() {
        return Err(Error::argument(format!(
            "{len} {what} for an index of {} points",
            index.len()
        )));
    }
    Ok(())
}

/// SPFH of `point_index` over neighbors within `radius` (self excluded).
pub fn spfh(
    index: &SpatialIndex,
    normals: &[Option<Vector3<f64>>],
    point_index: usize,
    radius: f64,
) -> Result<SpfhHistogram> {
    check_lengths(index, normals.len(), "normals")?;
    if !(radius > 0.0) {
        return Err(Error::argument("radius must be positive"));
    }
    let n_i = normals
        .get(point_index)
        .copied()
        .flatten()
        .ok_or_else(|| Error::argument(format!("point {point_index} has no normal")))?;
    let p_i = to_point(index.point(point_index));

    let mut counts = [0usize; DESCRIPTOR_LEN];
    let (mut pairs, mut skipped) = (0usize, 0usize);
    for hit in index.radius_query(index.point(point_index), radius) {
        if hit.index == point_index {
            continue;
        }
        let Some(n_j) = normals[hit.index] else {
            skipped += 1;
            continue;
        };
        match pair_angles(&p_i, &n_i, &to_point(index.point(hit.index)), &n_j) {
            Ok(angles) => {
                let [a, f, t] = feature_bins(&angles);
                counts[a] += 1;
                counts[BINS_PER_FEATURE + f] += 1;
                counts[2 * BINS_PER_FEATURE + t] += 1;
                pairs += 1;
            }
            Err(Error::Argument(_) | Error::DegenerateGeometry(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let mut bins = [0.0; DESCRIPTOR_LEN];
    if pairs > 0 {
        for (b, &c) in bins.iter_mut().zip(&counts) {
            *b = c as f64 / pairs as f64;
        }
    }
    Ok(SpfhHistogram {
        bins,
        pairs,
        skipped,
    })
}

/// FPFH(p) = SPFH(p) + (1/k) Σ SPFH(p_k) / w_k, with `w_k = |p - p_k|` over
/// the `k` radius neighbors. Coincident neighbors and neighbors without an
/// SPFH are left out of `k`.
pub fn fpfh_descriptor(
    index: &SpatialIndex,
    spfh_all: &[Option<SpfhHistogram>],
    point_index: usize,
    radius: f64,
) -> Result<FpfhDescriptor> {
    check_lengths(index, spfh_all.len(), "histograms")?;
    if !(radius > 0.0) {
        return Err(Error::argument("radius must be positive"));
    }
    let own = spfh_all
        .get(point_index)
        .and_then(|s| s.as_ref())
        .ok_or_else(|| Error::argument(format!("point {point_index} has no SPFH")))?;
    let mut weighted = [0.0; DESCRIPTOR_LEN];
    let mut k = 0usize;
    for hit in index.radius_query(index.point(point_index), radius) {
        if hit.index == point_index || hit.distance == 0.0 {
            continue;
        }
        let Some(neighbor) = &spfh_all[hit.index] else {
            continue;
        };
        let inv_w = 1.0 / hit.distance;
        for (acc, &b) in weighted.iter_mut().zip(&neighbor.bins) {
            *acc += inv_w * b;
        }
        k += 1;
    }
    let mut bins = own.bins;
    if k > 0 {
        let inv_k = 1.0 / k as f64;
        for (b, &w) in bins.iter_mut().zip(&weighted) {
            *b += inv_k * w;
        }
    }
    Ok(FpfhDescriptor { bins })
}

/// FPFH for every point that has a normal (`None` elsewhere).
pub fn compute_fpfh(
    index: &SpatialIndex,
    normals: &[Option<Vector3<f64>>],
    radius: f64,
) -> Result<Vec<Option<FpfhDescriptor>>> {
    check_lengths(index, normals.len(), "normals")?;
    let spfh_all: Vec<Option<SpfhHistogram>> = (0..index.len())
        .into_par_iter()
        .map(|i| match normals[i] {
            Some(_) => spfh(index, normals, i, radius).map(Some),
            None => Ok(None),
        })
        .collect::<Result<_>>()?;
    (0..index.len())
        .into_par_iter()
        .map(|i| match spfh_all[i] {
            Some(_) => fpfh_descriptor(index, &spfh_all, i, radius).map(Some),
            None => Ok(None),
        })
        .collect()
}

fn to_point(p: &[f64; 3]) -> Point3 {
    Vector3::new(p[0], p[1], p[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::build_index;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn coplanar_parallel_normals_give_zeros() {
        let a = pair_angles(
            &Vector3::zeros(),
            &Vector3::z(),
            &Vector3::x(),
            &Vector3::z(),
        )
        .unwrap();
        assert_eq!((a.alpha, a.phi, a.theta), (0.0, 0.0, 0.0));
    }

    #[test]
    fn perpendicular_target_normal_gives_quarter_turn() {
        let a = pair_angles(
            &Vector3::zeros(),
            &Vector3::z(),
            &Vector3::x(),
            &Vector3::x(),
        )
        .unwrap();
        assert!(a.alpha.abs() < 1e-15);
        assert!(a.phi.abs() < 1e-15);
        assert!((a.theta - FRAC_PI_2).abs() < 1e-15);
        assert!(!a.swapped);
    }

    #[test]
    fn coincident_points_rejected() {
        let p = Vector3::new(1.0, 1.0, 1.0);
        assert!(matches!(
            pair_angles(&p, &Vector3::z(), &p, &Vector3::z()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn line_along_normal_is_degenerate() {
        let r = pair_angles(
            &Vector3::zeros(),
            &Vector3::z(),
            &Vector3::new(0.0, 0.0, 2.0),
            &Vector3::z(),
        );
        assert!(matches!(r, Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn non_unit_normal_rejected() {
        let r = pair_angles(
            &Vector3::zeros(),
            &(Vector3::z() * 2.0),
            &Vector3::x(),
            &Vector3::z(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn isolated_point_has_empty_histogram() {
        let index = build_index(&[Vector3::zeros(), Vector3::new(10.0, 0.0, 0.0)]).unwrap();
        let normals = vec![Some(Vector3::z()); 2];
        let h = spfh(&index, &normals, 0, 1.0).unwrap();
        assert!(h.bins.iter().all(|&b| b == 0.0));
        assert_eq!(h.pairs, 0);
        let spfh_all = vec![Some(h.clone()), Some(h.clone())];
        let f = fpfh_descriptor(&index, &spfh_all, 0, 1.0).unwrap();
        assert_eq!(f.bins, h.bins);
    }

    #[test]
    fn missing_normal_is_an_error() {
        let index = build_index(&[Vector3::zeros()]).unwrap();
        assert!(spfh(&index, &[None], 0, 1.0).is_err());
    }

    #[test]
    fn two_point_fpfh_by_hand() {
        let index = build_index(&[Vector3::zeros(), Vector3::new(2.0, 0.0, 0.0)]).unwrap();
        let mut a = [0.0; DESCRIPTOR_LEN];
        let mut b = [0.0; DESCRIPTOR_LEN];
        a[0] = 1.0;
        a[12] = 1.0;
        a[30] = 1.0;
        b[5] = 1.0;
        b[16] = 1.0;
        b[27] = 1.0;
        let hist = |bins| {
            Some(SpfhHistogram {
                bins,
                pairs: 1,
                skipped: 0,
            })
        };
        let f = fpfh_descriptor(&index, &[hist(a), hist(b)], 0, 3.0).unwrap();
        for i in 0..DESCRIPTOR_LEN {
            assert!((f.bins[i] - (a[i] + 0.5 * b[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicate_neighbor_is_skipped() {
        let index = build_index(&[Vector3::zeros(), Vector3::zeros()]).unwrap();
        let mut a = [0.0; DESCRIPTOR_LEN];
        a[3] = 1.0;
        let h = Some(SpfhHistogram {
            bins: a,
            pairs: 0,
            skipped: 1,
        });
        let f = fpfh_descriptor(&index, &[h.clone(), h], 0, 1.0).unwrap();
        assert_eq!(f.bins, a);
    }
}
