//! Orthographic projection of kernels to screen-space ellipses.

use serde::{Deserialize, Serialize};

use crate::splat::{display_rgb, evaluate_sh};
use crate::{Error, Mat3, Result, Vec3};

/// World axis the orthographic camera looks along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraAxis {
    X,
    Y,
    #[default]
    Z,
}

impl std::str::FromStr for CameraAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(CameraAxis::X),
            "y" => Ok(CameraAxis::Y),
            "z" => Ok(CameraAxis::Z),
            _ => Err(Error::invalid(format!("camera axis must be x, y or z, got {s:?}"))),
        }
    }
}

impl CameraAxis {
    /// World directions of screen x, screen y and depth (towards the camera).
    /// The three form a right-handed frame.
    pub fn basis(self) -> [Vec3; 3] {
        match self {
            CameraAxis::Z => [Vec3::x(), Vec3::y(), Vec3::z()],
            CameraAxis::Y => [Vec3::z(), Vec3::x(), Vec3::y()],
            CameraAxis::X => [Vec3::y(), Vec3::z(), Vec3::x()],
        }
    }

    /// Viewing direction, from the camera into the scene.
    pub fn view_direction(self) -> Vec3 {
        -self.basis()[2]
    }
}

/// 2D Gaussian footprint: one-sigma ellipse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    /// Major then minor semi-axis (standard deviations).
    pub axes: [f64; 2],
    /// Major-axis angle from screen x, radians in `(−π/2, π/2]`.
    pub angle: f64,
    /// Larger is closer to the camera.
    pub depth: f64,
}

pub fn project_ellipse(position: &Vec3, covariance: &Mat3, axis: CameraAxis) -> Ellipse {
    let [ex, ey, ez] = axis.basis();
    let a = ex.dot(&(covariance * ex));
    let b = ex.dot(&(covariance * ey));
    let c = ey.dot(&(covariance * ey));
    let mean = 0.5 * (a + c);
    let diff = 0.5 * (a - c);
    let rad = (diff * diff + b * b).sqrt();
    let l1 = (mean + rad).max(0.0);
    let l2 = (mean - rad).max(0.0);
    let mut angle = if rad == 0.0 { 0.0 } else { 0.5 * (2.0 * b).atan2(a - c) };
    if angle <= -std::f64::consts::FRAC_PI_2 {
        angle += std::f64::consts::PI;
    }
    Ellipse {
        center: [position.dot(&ex), position.dot(&ey)],
        axes: [l1.sqrt(), l2.sqrt()],
        angle,
        depth: position.dot(&ez),
    }
}

/// Display color seen from `axis`, with the SH evaluated in the kernel's
/// material frame (`R_accᵀ d`).
pub fn kernel_rgb(sh_coeffs: &[f64], rotation: &Mat3, axis: CameraAxis) -> Result<Vec3> {
    let d = rotation.transpose() * axis.view_direction();
    Ok(display_rgb(&evaluate_sh(sh_coeffs, &d.normalize())?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_is_right_handed() {
        for axis in [CameraAxis::X, CameraAxis::Y, CameraAxis::Z] {
            let [x, y, z] = axis.basis();
            assert_eq!(x.cross(&y), z);
        }
        assert_eq!("Y".parse::<CameraAxis>().unwrap(), CameraAxis::Y);
        assert!("w".parse::<CameraAxis>().is_err());
    }

    #[test]
    fn isotropic_kernel_is_a_circle() {
        let e = project_ellipse(&Vec3::new(1.0, 2.0, 3.0), &(Mat3::identity() * 0.04), CameraAxis::Z);
        assert_eq!(e.center, [1.0, 2.0]);
        assert!((e.axes[0] - 0.2).abs() < 1e-15 && (e.axes[1] - 0.2).abs() < 1e-15);
        assert_eq!(e.depth, 3.0);
    }

    #[test]
    fn rotated_ellipse_matches_its_covariance() {
        let th: f64 = 0.4;
        let r = nalgebra::Rotation3::from_axis_angle(&Vec3::z_axis(), th).into_inner();
        let cov = r * Mat3::from_diagonal(&Vec3::new(9.0, 1.0, 4.0)) * r.transpose();
        let e = project_ellipse(&Vec3::zeros(), &cov, CameraAxis::Z);
        assert!((e.axes[0] - 3.0).abs() < 1e-12);
        assert!((e.axes[1] - 1.0).abs() < 1e-12);
        assert!((e.angle - th).abs() < 1e-12);
        // looking along x the screen sees (y, z): std 1 along y... after rotation
        let side = project_ellipse(&Vec3::zeros(), &cov, CameraAxis::X);
        let syy = cov[(1, 1)];
        let major = side.axes[0].powi(2).max(side.axes[1].powi(2));
        assert!((major - syy.max(4.0)).abs() < 1e-12);
    }

    #[test]
    fn color_follows_rotation() {
        // degree 1, red channel varies along x only
        let mut c = vec![0.0; 12];
        c[9] = 1.0;
        let identity = kernel_rgb(&c, &Mat3::identity(), CameraAxis::X).unwrap();
        let flip = nalgebra::Rotation3::from_axis_angle(&Vec3::z_axis(), std::f64::consts::PI).into_inner();
        let flipped = kernel_rgb(&c, &flip, CameraAxis::X).unwrap();
        assert!(identity.x < 0.5 && flipped.x > 0.5);
    }
}
