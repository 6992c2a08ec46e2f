//! Ray picking for interactive forces.

use splatsim::{Error, Result, Vec3};

/// Kernels whose center lies within `radius` of the half-line
/// `origin + t·direction, t ≥ 0`. Ids come back ascending.
pub fn pick_kernels(origin: &Vec3, direction: &Vec3, radius: f64, positions: &[Vec3]) -> Result<Vec<usize>> {
    let n = direction.norm();
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::invalid("ray direction must be non-zero"));
    }
    if !(radius.is_finite() && radius >= 0.0) {
        return Err(Error::invalid("pick radius must be finite and non-negative"));
    }
    if !origin.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("ray origin".into()));
    }
    let d = direction / n;
    let r2 = radius * radius;
    Ok(positions
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let rel = *p - origin;
            let t = rel.dot(&d).max(0.0);
            (rel - d * t).norm_squared() <= r2
        })
        .map(|(i, _)| i)
        .collect())
}
