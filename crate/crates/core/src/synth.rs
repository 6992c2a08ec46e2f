//! Procedural test scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::splat::{GaussianKernel, MaterialAttributes, SceneTemplate, SH_C0};
use crate::{Error, Result, Vec3};

/// Attribute dimension of generated scenes (zero vectors).
pub const SYNTH_ATTRIBUTE_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneShape {
    /// Jittered lattice with aspect 8:2:1, anchored at its `x = 0` end.
    /// Kernels are ordered coarse to fine (block centers first, then x-major).
    Beam,
    /// Uniform random points in a ball, anchored at its lowest point.
    SphereCloud,
}

impl std::str::FromStr for SceneShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beam" => Ok(SceneShape::Beam),
            "sphere-cloud" => Ok(SceneShape::SphereCloud),
            _ => Err(Error::invalid(format!("shape must be beam or sphere-cloud, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub shape: SceneShape,
    pub count: usize,
    /// Typical nearest-neighbor distance.
    pub spacing: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            shape: SceneShape::Beam,
            count: 2000,
            spacing: 0.02,
            seed: 0,
        }
    }
}

/// Beam lattice dimensions `(nx, ny, nz)` holding at least `count` points.
pub fn beam_dims(count: usize) -> (usize, usize, usize) {
    let nz = ((count as f64 / 16.0).cbrt().round() as usize).max(1);
    let ny = 2 * nz;
    let nx = count.div_ceil(ny * nz).max(1);
    (nx, ny, nz)
}

/// Deterministic scene: isotropic kernels with std `spacing / 2`, density 1,
/// zero attributes and a color ramp along the longest axis.
pub fn generate_synthetic_scene(spec: &SynthSpec) -> Result<SceneTemplate> {
    if spec.count == 0 {
        return Err(crate::Error::invalid("synthetic scene needs at least one kernel"));
    }
    if !(spec.spacing > 0.0) || !spec.spacing.is_finite() {
        return Err(crate::Error::invalid(format!("spacing must be positive, got {}", spec.spacing)));
    }
    let s = spec.spacing;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (positions, anchor) = if spec.count == 1 {
        (vec![Vec3::zeros()], Vec3::zeros())
    } else {
        match spec.shape {
            SceneShape::Beam => {
                let (_, ny, nz) = beam_dims(spec.count);
                let jitter = 0.1 * s;
                let mut cells: Vec<([usize; 3], Vec3)> = (0..spec.count)
                    .map(|i| {
                        let (ix, rest) = (i / (ny * nz), i % (ny * nz));
                        let (iy, iz) = (rest / nz, rest % nz);
                        let lattice = Vec3::new(ix as f64, iy as f64, iz as f64) * s;
                        let p = lattice
                            + Vec3::new(
                                rng.random_range(-jitter..=jitter),
                                rng.random_range(-jitter..=jitter),
                                rng.random_range(-jitter..=jitter),
                            );
                        ([ix, iy, iz], p)
                    })
                    .collect();
                // coarse-to-fine order: centers of 3×3×3 blocks first, so greedy
                // clustering seeds on a regular sub-lattice
                cells.sort_by_key(|(idx, _)| idx.iter().any(|i| i % 3 != 1));
                let pts = cells.into_iter().map(|(_, p)| p).collect();
                let anchor = Vec3::new(0.0, (ny - 1) as f64 * s / 2.0, (nz - 1) as f64 * s / 2.0);
                (pts, anchor)
            }
            SceneShape::SphereCloud => {
                let radius = s * (3.0 * spec.count as f64 / (4.0 * std::f64::consts::PI)).cbrt();
                let mut pts = Vec::with_capacity(spec.count);
                while pts.len() < spec.count {
                    let p = Vec3::new(
                        rng.random_range(-1.0..=1.0),
                        rng.random_range(-1.0..=1.0),
                        rng.random_range(-1.0..=1.0),
                    );
                    if p.norm_squared() <= 1.0 {
                        pts.push(p * radius);
                    }
                }
                (pts, Vec3::new(0.0, 0.0, -radius))
            }
        }
    };

    let root = positions
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - anchor).norm_squared().total_cmp(&(b.1 - anchor).norm_squared()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let (lo, hi) = positions.iter().fold(
        (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(p), hi.sup(p)),
    );
    let extent = hi - lo;
    let axis = extent.imax();
    let kernels = positions
        .iter()
        .map(|p| {
            let u = if extent[axis] > 0.0 { (p[axis] - lo[axis]) / extent[axis] } else { 0.0 };
            // coefficients chosen so the rendered color is the ramp (offset 0.5 removed)
            let rgb = [0.25 + 0.6 * u, 0.55 - 0.2 * u, 0.85 - 0.6 * u];
            let mut k = GaussianKernel::isotropic(*p, 0.5 * s);
            k.sh_coeffs = rgb.iter().map(|c| (c - 0.5) / SH_C0).collect();
            k
        })
        .collect();
    let attributes = vec![MaterialAttributes::new(1.0, SYNTH_ATTRIBUTE_DIM); spec.count];
    SceneTemplate::new(kernels, attributes, root)
}

/// Pads (or truncates) every kernel's SH coefficients to `degree`.
pub fn with_sh_degree(mut scene: SceneTemplate, degree: usize) -> Result<SceneTemplate> {
    if degree > 3 {
        return Err(crate::Error::config(format!("sh degree {degree} above 3")));
    }
    let len = 3 * (degree + 1) * (degree + 1);
    for k in &mut scene.kernels {
        k.sh_coeffs.resize(len, 0.0);
    }
    Ok(scene)
}
