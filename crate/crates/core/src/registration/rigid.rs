use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::cloud::{Point3, RigidTransform};
use crate::error::{Error, Result};

/// Relative eigenvalue floor below which a point set counts as collinear.
const COLLINEAR_EPS: f64 = 1e-12;

fn centroid(points: &[Point3]) -> Point3 {
    points.iter().sum::<Point3>() / points.len() as f64
}

/// Least-squares rigid transform mapping `source[i]` onto `target[i]`
/// (Kabsch with the reflection case sign-corrected).
pub fn estimate_rigid(source: &[Point3], target: &[Point3]) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(Error::argument(format!(
            "{} source points vs {} target points",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::argument("at least 3 point pairs are required"));
    }
    let cs = centroid(source);
    let ct = centroid(target);

    let mut scatter = Matrix3::zeros();
    let mut cross = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        let ds = s - cs;
        scatter += ds * ds.transpose();
        cross += ds * (t - ct).transpose();
    }

    let spread = SymmetricEigen::new(scatter).eigenvalues;
    let mut ev = [spread[0], spread[1], spread[2]];
    ev.sort_by(f64::total_cmp);
    if ev[2] <= 0.0 || ev[1] <= COLLINEAR_EPS * ev[2] {
        return Err(Error::DegenerateGeometry(
            "source points are collinear or coincident".into(),
        ));
    }

    let svd = cross.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::DegenerateGeometry("SVD failed".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::DegenerateGeometry("SVD failed".into()))?;
    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = v * d * u.transpose();
    let translation: Vector3<f64> = ct - rotation * cs;
    Ok(RigidTransform {
        rotation,
        translation,
    })
}
