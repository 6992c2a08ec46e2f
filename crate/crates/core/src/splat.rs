//! Gaussian-kernel data model: equivalent volume/mass and spherical-harmonics color.
//!
//! A kernel is treated as a continuous piece of matter whose density is
//! proportional to the unnormalized Gaussian `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`. Its
//! integral gives the equivalent volume `√det(2πΣ)`; multiplying by the kernel
//! density gives its mass.

use serde::{Deserialize, Serialize};

use crate::{Error, Mat3, Result, Vec3};

/// Highest supported spherical-harmonics degree.
pub const MAX_SH_DEGREE: usize = 3;

/// Degree-0 basis value `1/(2√π)`.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 3] = [
    1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 5] = [
    0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    1.445_305_721_320_277,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernel {
    pub position: Vec3,
    /// Symmetric positive definite, in length².
    pub covariance: Mat3,
    /// Basis-major, channel-interleaved: `[b0.r, b0.g, b0.b, b1.r, ...]`.
    pub sh_coeffs: Vec<f64>,
    pub opacity: f64,
}

impl GaussianKernel {
    /// Kernel with a constant (degree-0) color.
    pub fn new(position: Vec3, covariance: Mat3, opacity: f64) -> Self {
        Self {
            position,
            covariance,
            sh_coeffs: vec![0.0; 3],
            opacity,
        }
    }

    pub fn isotropic(position: Vec3, std_dev: f64) -> Self {
        Self::new(position, Mat3::identity() * (std_dev * std_dev), 1.0)
    }

    pub fn sh_degree(&self) -> Option<usize> {
        sh_degree_for_len(self.sh_coeffs.len())
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        let bad = |reason: &str| Error::InvalidKernel {
            index,
            reason: reason.to_string(),
        };
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(bad("non-finite position"));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(bad("opacity outside [0, 1]"));
        }
        if self.sh_degree().is_none() {
            return Err(bad("sh coefficient count is not 3·(degree+1)² for degree ≤ 3"));
        }
        if !is_spd(&self.covariance) {
            return Err(Error::NonSpd { index });
        }
        Ok(())
    }
}

/// Per-kernel, time-invariant material description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialAttributes {
    pub density: f64,
    pub attribute_vector: Vec<f64>,
}

impl MaterialAttributes {
    pub fn new(density: f64, dim: usize) -> Self {
        Self {
            density,
            attribute_vector: vec![0.0; dim],
        }
    }
}

/// Material-space (t = 0) configuration of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTemplate {
    pub kernels: Vec<GaussianKernel>,
    pub attributes: Vec<MaterialAttributes>,
    /// Index of the static kernel that anchors all deformations.
    pub root_kernel_id: usize,
}

impl SceneTemplate {
    pub fn new(
        kernels: Vec<GaussianKernel>,
        attributes: Vec<MaterialAttributes>,
        root_kernel_id: usize,
    ) -> Result<Self> {
        let scene = Self {
            kernels,
            attributes,
            root_kernel_id,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn root_position(&self) -> Vec3 {
        self.kernels[self.root_kernel_id].position
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.kernels.iter().map(|k| k.position).collect()
    }

    pub fn attribute_dim(&self) -> usize {
        self.attributes
            .first()
            .map_or(0, |a| a.attribute_vector.len())
    }

    pub fn masses(&self) -> Result<Vec<f64>> {
        self.kernels
            .iter()
            .zip(&self.attributes)
            .map(|(k, a)| kernel_mass(k, a))
            .collect()
    }

    /// Axis-aligned bounds of kernel centers.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for k in &self.kernels {
            lo = lo.inf(&k.position);
            hi = hi.sup(&k.position);
        }
        (lo, hi)
    }

    pub fn bounding_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (hi - lo).norm()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(Error::invalid("scene has no kernels"));
        }
        if self.kernels.len() != self.attributes.len() {
            return Err(Error::shape(format!(
                "{} kernels but {} attribute records",
                self.kernels.len(),
                self.attributes.len()
            )));
        }
        if self.root_kernel_id >= self.kernels.len() {
            return Err(Error::invalid(format!(
                "root kernel id {} out of range",
                self.root_kernel_id
            )));
        }
        let dim = self.attribute_dim();
        for (i, (k, a)) in self.kernels.iter().zip(&self.attributes).enumerate() {
            k.validate(i)?;
            if !(a.density > 0.0 && a.density.is_finite()) {
                return Err(Error::InvalidKernel {
                    index: i,
                    reason: "density must be positive".into(),
                });
            }
            if a.attribute_vector.len() != dim {
                return Err(Error::InvalidKernel {
                    index: i,
                    reason: format!(
                        "attribute dimension {} differs from scene dimension {dim}",
                        a.attribute_vector.len()
                    ),
                });
            }
        }
        Ok(())
    }
}

/// SPD test by Cholesky factorization (also requires exact symmetry up to 1e-12 relative).
pub fn is_spd(m: &Mat3) -> bool {
    if !m.iter().all(|v| v.is_finite()) {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return false;
    }
    nalgebra::Cholesky::new(*m).is_some()
}

/// Equivalent volume `√det(2πΣ)` of a kernel.
pub fn kernel_volume(kernel: &GaussianKernel) -> Result<f64> {
    covariance_volume(&kernel.covariance).ok_or(Error::NotSpd)
}

/// `√det(2πΣ)`, or `None` when `Σ` is not SPD.
pub fn covariance_volume(cov: &Mat3) -> Option<f64> {
    if !is_spd(cov) {
        return None;
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    Some((two_pi.powi(3) * cov.determinant()).sqrt())
}

pub fn kernel_mass(kernel: &GaussianKernel, attrs: &MaterialAttributes) -> Result<f64> {
    if !(attrs.density > 0.0) {
        return Err(Error::invalid("density must be positive"));
    }
    Ok(attrs.density * kernel_volume(kernel)?)
}

/// Number of coefficients per channel for a degree.
pub const fn sh_basis_len(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

fn sh_degree_for_len(len: usize) -> Option<usize> {
    (0..=MAX_SH_DEGREE).find(|&d| 3 * sh_basis_len(d) == len)
}

/// Real spherical-harmonics basis (no Condon–Shortley phase) up to degree 3.
///
/// Order: `Y00, Y1-1, Y10, Y11, Y2-2, ..., Y33`, i.e. `(y, z, x)` for degree 1.
pub fn sh_basis(d: &Vec3) -> [f64; 16] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[0] * y * z,
        SH_C2[1] * (3.0 * zz - 1.0),
        SH_C2[0] * x * z,
        SH_C2[2] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * x * y * z,
        SH_C3[2] * y * (5.0 * zz - 1.0),
        SH_C3[3] * z * (5.0 * zz - 3.0),
        SH_C3[2] * x * (5.0 * zz - 1.0),
        SH_C3[4] * z * (xx - yy),
        SH_C3[0] * x * (xx - 3.0 * yy),
    ]
}

/// Evaluates view-dependent color for `direction`.
///
/// Directions within 1e-3 of unit length are renormalized (with a warning past
/// 1e-9); anything further off is rejected.
pub fn evaluate_sh(sh_coeffs: &[f64], direction: &Vec3) -> Result<Vec3> {
    let degree = sh_degree_for_len(sh_coeffs.len()).ok_or_else(|| {
        Error::invalid(format!(
            "{} sh coefficients is not 3·(degree+1)² for degree ≤ 3",
            sh_coeffs.len()
        ))
    })?;
    let norm = direction.norm();
    if !norm.is_finite() || (norm - 1.0).abs() >= 1e-3 {
        return Err(Error::invalid(format!(
            "view direction has norm {norm}, expected unit length"
        )));
    }
    if (norm - 1.0).abs() > 1e-9 {
        log::warn!("renormalizing view direction with norm {norm}");
    }
    let d = direction / norm;
    let basis = sh_basis(&d);
    let mut rgb = Vec3::zeros();
    for (b, coeffs) in basis.iter().take(sh_basis_len(degree)).zip(sh_coeffs.chunks(3)) {
        rgb += Vec3::new(coeffs[0], coeffs[1], coeffs[2]) * *b;
    }
    Ok(rgb)
}

/// Display-space color: `+0.5` offset then clamp to `[0, 1]`. Export/render only.
pub fn display_rgb(rgb: &Vec3) -> Vec3 {
    rgb.map(|c| (c + 0.5).clamp(0.0, 1.0))
}
