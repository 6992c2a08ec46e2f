//! Polar-factored deformation gradients `F = U·diag(λ)·Vᵀ`.

use serde::{Deserialize, Serialize};

use crate::splat::is_spd;
use crate::{Error, Mat3, Result, Vec3};

/// Quaternion as `[w, x, y, z]`.
pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarSvdGradient {
    pub quat_u: Quat,
    pub quat_v: Quat,
    /// Singular values `[p, q, r]`, all positive.
    pub lambda: Vec3,
}

impl Default for PolarSvdGradient {
    fn default() -> Self {
        Self::identity()
    }
}

impl PolarSvdGradient {
    pub fn identity() -> Self {
        Self {
            quat_u: IDENTITY_QUAT,
            quat_v: IDENTITY_QUAT,
            lambda: Vec3::new(1.0, 1.0, 1.0),
        }
    }

    /// Pure rotation by `angle` about `axis` (U = rotation, V = I).
    pub fn rotation(axis: &Vec3, angle: f64) -> Self {
        Self {
            quat_u: axis_angle_quat(axis, angle),
            quat_v: IDENTITY_QUAT,
            lambda: Vec3::new(1.0, 1.0, 1.0),
        }
    }

    /// Pure stretch along the coordinate axes.
    pub fn stretch(lambda: Vec3) -> Self {
        Self {
            quat_u: IDENTITY_QUAT,
            quat_v: IDENTITY_QUAT,
            lambda,
        }
    }

    /// Checks unit quaternions (1e-9) and positive singular values.
    pub fn validate(&self) -> Result<()> {
        for (name, q) in [("U", &self.quat_u), ("V", &self.quat_v)] {
            let n = quat_norm(q);
            if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("quaternion {name} has norm {n}")));
            }
        }
        if !self.lambda.iter().all(|l| *l > 0.0 && l.is_finite()) {
            return Err(Error::invalid(format!(
                "singular values must be positive, got {:?}",
                self.lambda.as_slice()
            )));
        }
        Ok(())
    }

    /// Copy with `λ` rescaled to unit product.
    pub fn normalized(&self) -> Result<Self> {
        Ok(Self {
            lambda: normalize_lambda(self.lambda.x, self.lambda.y, self.lambda.z)?,
            ..*self
        })
    }

    /// Copy with nonnegative scalar parts (serialization form).
    pub fn canonical(&self) -> Self {
        Self {
            quat_u: canonical_quat(&self.quat_u),
            quat_v: canonical_quat(&self.quat_v),
            lambda: self.lambda,
        }
    }
}

pub fn quat_norm(q: &Quat) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn canonical_quat(q: &Quat) -> Quat {
    if q[0] < 0.0 {
        q.map(|v| -v)
    } else {
        *q
    }
}

pub fn axis_angle_quat(axis: &Vec3, angle: f64) -> Quat {
    let a = axis.normalize();
    let (s, c) = (0.5 * angle).sin_cos();
    [c, a.x * s, a.y * s, a.z * s]
}

/// Rotation matrix of a unit quaternion.
pub(crate) fn unit_quat_matrix(q: &Quat) -> Mat3 {
    let [w, x, y, z] = *q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Rotation matrix of `q`; `q` is renormalized first. Quaternions further than
/// 1e-6 from unit norm or the zero quaternion are rejected.
pub fn quat_to_rotation(q: &Quat) -> Result<Mat3> {
    let n = quat_norm(q);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::invalid("zero or non-finite quaternion"));
    }
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("quaternion norm {n} is not 1")));
    }
    Ok(unit_quat_matrix(&q.map(|v| v / n)))
}

/// Divides each component by `(pqr)^{1/3}`.
pub fn normalize_lambda(p: f64, q: f64, r: f64) -> Result<Vec3> {
    if !(p > 0.0 && q > 0.0 && r > 0.0) || !(p * q * r).is_finite() {
        return Err(Error::invalid(format!(
            "singular values must be positive, got ({p}, {q}, {r})"
        )));
    }
    // in log space, so the product lands on 1 to rounding even for extreme scales
    let mean = (p.ln() + q.ln() + r.ln()) / 3.0;
    Ok(Vec3::new((p.ln() - mean).exp(), (q.ln() - mean).exp(), (r.ln() - mean).exp()))
}

pub fn compose(g: &PolarSvdGradient) -> Mat3 {
    let u = unit_quat_matrix(&g.quat_u);
    let v = unit_quat_matrix(&g.quat_v);
    u * Mat3::from_diagonal(&g.lambda) * v.transpose()
}

/// `R = U·Vᵀ`, the rotation used for view-dependent color.
pub fn deformation_rotation(g: &PolarSvdGradient) -> Mat3 {
    unit_quat_matrix(&g.quat_u) * unit_quat_matrix(&g.quat_v).transpose()
}

/// `σ = F·Σ·Fᵀ`, symmetrized.
pub fn transform_covariance(f: &Mat3, sigma: &Mat3) -> Result<Mat3> {
    let det = f.determinant();
    if !det.is_finite() || det.abs() <= 1e-300 {
        return Err(Error::invalid("singular deformation gradient"));
    }
    if !is_spd(sigma) {
        return Err(Error::NotSpd);
    }
    let out = f * sigma * f.transpose();
    Ok((out + out.transpose()) * 0.5)
}
