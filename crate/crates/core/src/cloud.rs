//! Core geometric payloads: point clouds, rigid transforms and trajectories.

use std::ops::Mul;

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// RGB triple, one byte per channel.
pub type Rgb = [u8; 3];

/// Positions with optional per-point colors and semantic labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub colors: Option<Vec<Rgb>>,
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_points(points: Vec<Point3>) -> Self {
        Self {
            points,
            colors: None,
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks finiteness and attribute lengths.
    pub fn validate(&self) -> Result<()> {
        check_finite(&self.points)?;
        if let Some(colors) = &self.colors {
            if colors.len() != self.points.len() {
                return Err(Error::argument(format!(
                    "{} colors for {} points",
                    colors.len(),
                    self.points.len()
                )));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.points.len() {
                return Err(Error::argument(format!(
                    "{} labels for {} points",
                    labels.len(),
                    self.points.len()
                )));
            }
        }
        Ok(())
    }

    /// Returns a copy with every position mapped through `transform`.
    pub fn transformed(&self, transform: &RigidTransform) -> Self {
        Self {
            points: self.points.iter().map(|p| transform.apply(p)).collect(),
            colors: self.colors.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Appends `other`, keeping attributes only when both sides carry them.
    pub fn extend(&mut self, other: &PointCloud) {
        let was_empty = self.points.is_empty();
        self.colors = merge_attr(self.colors.take(), &other.colors, was_empty, other.len());
        self.labels = merge_attr(self.labels.take(), &other.labels, was_empty, other.len());
        self.points.extend_from_slice(&other.points);
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            colors: self
                .colors
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }
}

fn merge_attr<T: Clone>(
    mine: Option<Vec<T>>,
    theirs: &Option<Vec<T>>,
    mine_empty: bool,
    their_len: usize,
) -> Option<Vec<T>> {
    match (mine, theirs) {
        (Some(mut a), Some(b)) => {
            a.extend_from_slice(b);
            Some(a)
        }
        (None, Some(b)) if mine_empty => Some(b.clone()),
        (Some(a), None) if their_len == 0 => Some(a),
        _ => None,
    }
}

pub(crate) fn check_finite(points: &[Point3]) -> Result<()> {
    match points
        .iter()
        .position(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()))
    {
        Some(index) => Err(Error::Data {
            index,
            message: "non-finite coordinate".into(),
        }),
        None => Ok(()),
    }
}

/// Tolerance for the orthonormality / determinant invariant of a rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Proper rigid motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, rejecting rotations that are not orthonormal with
    /// determinant +1 within [`ROTATION_TOLERANCE`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        if !t.is_valid(ROTATION_TOLERANCE) {
            return Err(Error::argument(format!(
                "rotation is not proper orthonormal (||RtR - I|| = {:.3e}, det = {})",
                t.orthonormality_error(),
                rotation.determinant()
            )));
        }
        Ok(t)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation by `angle` radians about the z axis, followed by `translation`.
    pub fn from_yaw(angle: f64, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), angle).matrix(),
            translation,
        }
    }

    /// Exponential map of the twist (rotation vector `omega`, translation `delta`),
    /// using the decoupled SO(3) x R^3 parameterization.
    pub fn from_rotation_vector(omega: Vector3<f64>, delta: Vector3<f64>) -> Self {
        Self {
            rotation: *Rotation3::new(omega).matrix(),
            translation: delta,
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `||R^T R - I||_F`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }

    pub fn is_valid(&self, tolerance: f64) -> bool {
        self.rotation.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
            && self.orthonormality_error() <= tolerance
            && (self.rotation.determinant() - 1.0).abs() <= tolerance
    }

    /// Projects the rotation onto SO(3) (nearest proper rotation in Frobenius norm).
    pub fn orthonormalized(&self) -> RigidTransform {
        RigidTransform {
            rotation: nearest_rotation(&self.rotation),
            translation: self.translation,
        }
    }

    /// Rotation angle in radians.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Row-major `[R | t]`, 12 numbers.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    /// Inverse of [`to_row_major`](Self::to_row_major); performs no validation.
    pub fn from_row_major_unchecked(v: &[f64; 12]) -> RigidTransform {
        RigidTransform {
            rotation: Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
            translation: Vector3::new(v[3], v[7], v[11]),
        }
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

/// Nearest proper rotation via SVD, with the reflection case sign-corrected.
pub(crate) fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// Ordered per-scan poses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<RigidTransform>,
}

impl Trajectory {
    pub fn new(poses: Vec<RigidTransform>) -> Self {
        Self { poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compose_and_inverse_cancel() {
        let a = RigidTransform::from_rotation_vector(
            Vector3::new(0.3, -0.2, 1.1),
            Vector3::new(1.0, 2.0, -3.0),
        );
        let id = a.compose(&a.inverse());
        assert!((id.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!(id.translation.norm() < 1e-12);
        assert!(a.is_valid(1e-12));
    }

    #[test]
    fn compose_applies_right_operand_first() {
        let shift = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let turn = RigidTransform::from_yaw(std::f64::consts::FRAC_PI_2, Vector3::zeros());
        let p = (turn * shift).apply(&Vector3::zeros());
        assert!((p - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn reflection_is_rejected() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(m, Vector3::zeros()).is_err());
    }

    #[test]
    fn extend_keeps_common_attributes() {
        let mut a = PointCloud::from_points(vec![Vector3::zeros()]);
        a.labels = Some(vec![4]);
        let mut b = PointCloud::from_points(vec![Vector3::x()]);
        b.labels = Some(vec![5]);
        b.colors = Some(vec![[1, 2, 3]]);
        a.extend(&b);
        assert_eq!(a.labels, Some(vec![4, 5]));
        assert_eq!(a.colors, None);
        assert!(a.validate().is_ok());
    }
}
