//! Invariant suite run by `splatsim validate`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{conservation_check, momentum_loss};
use crate::deformation::{compose, normalize_lambda, PolarSvdGradient, Quat};
use crate::hierarchy::Hierarchy;
use crate::propagation::{expanded_position, propagate_recursive, LevelDeformationField};
use crate::splat::{kernel_mass, GaussianKernel, SceneTemplate};
use crate::{Mat3, Result, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub groups: Vec<GroupResult>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn failures(&self) -> Vec<&GroupResult> {
        self.groups.iter().filter(|g| !g.passed).collect()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for g in &self.groups {
            writeln!(f, "{} {:<22} {}", if g.passed { "PASS" } else { "FAIL" }, g.name, g.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidateOptions {
    pub seed: u64,
    /// Random gradients drawn for the determinant sweep.
    pub det_samples: usize,
    /// Kernels checked by numerical integration.
    pub integral_kernels: usize,
    /// Midpoint-rule cells per axis for the integrals.
    pub integral_cells: usize,
    /// Applied to every CMS instead of random normalized gradients.
    pub fixture: Option<PolarSvdGradient>,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            det_samples: 10_000,
            integral_kernels: 5,
            integral_cells: 48,
            fixture: None,
        }
    }
}

pub fn random_quat(rng: &mut impl Rng) -> Quat {
    loop {
        let q: Quat = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return q.map(|v| v / n);
        }
    }
}

/// Random gradient with `ln λ` uniform in `±spread`.
pub fn random_gradient(rng: &mut impl Rng, spread: f64, normalized: bool) -> PolarSvdGradient {
    let lambda = Vec3::from_fn(|_, _| rng.random_range(-spread..=spread).exp());
    let lambda = if normalized {
        normalize_lambda(lambda.x, lambda.y, lambda.z).expect("positive")
    } else {
        lambda
    };
    PolarSvdGradient {
        quat_u: random_quat(rng),
        quat_v: random_quat(rng),
        lambda,
    }
}

pub fn random_fields(h: &Hierarchy, rng: &mut impl Rng, spread: f64) -> Vec<LevelDeformationField> {
    (1..=h.num_levels())
        .map(|l| LevelDeformationField {
            level: l,
            gradients: (0..h.level(l).len()).map(|_| random_gradient(rng, spread, true)).collect(),
        })
        .collect()
}

/// Mass and barycenter of `ρ·exp(−½ (x−μ)ᵀΣ⁻¹(x−μ))` by the midpoint rule on a
/// `±6σ` box in the covariance eigenframe.
pub fn integrate_kernel(kernel: &GaussianKernel, density: f64, cells: usize) -> (f64, Vec3) {
    let eig = nalgebra::SymmetricEigen::new(kernel.covariance);
    let sd = eig.eigenvalues.map(|v| v.sqrt());
    let h = sd * (12.0 / cells as f64);
    let cell_volume = h.x * h.y * h.z;
    let coord = |i: usize, axis: usize| -6.0 * sd[axis] + (i as f64 + 0.5) * h[axis];
    let mut mass = 0.0;
    let mut moment = Vec3::zeros();
    for i in 0..cells {
        let y0 = coord(i, 0);
        for j in 0..cells {
            let y1 = coord(j, 1);
            for k in 0..cells {
                let y2 = coord(k, 2);
                let q = (y0 / sd.x).powi(2) + (y1 / sd.y).powi(2) + (y2 / sd.z).powi(2);
                let w = density * (-0.5 * q).exp() * cell_volume;
                let x = kernel.position + eig.eigenvectors * Vec3::new(y0, y1, y2);
                mass += w;
                moment += x * w;
            }
        }
    }
    (mass, moment / mass)
}

fn group(name: &str, passed: bool, detail: String) -> GroupResult {
    GroupResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Runs every invariant group on `scene` and its hierarchy.
pub fn run_validation(scene: &SceneTemplate, h: &Hierarchy, opts: &ValidateOptions) -> Result<ValidationReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut groups = Vec::new();

    groups.push(match h.check_invariants() {
        Ok(()) => group("hierarchy", true, format!("level counts {:?}", h.level_counts())),
        Err(e) => group("hierarchy", false, e.to_string()),
    });

    let worst_det = (0..opts.det_samples)
        .map(|_| (compose(&random_gradient(&mut rng, 1.0, true)).determinant() - 1.0).abs())
        .fold(0.0, f64::max);
    groups.push(group(
        "det-F",
        worst_det < 1e-9,
        format!("max |det F - 1| = {worst_det:.3e} over {} samples (tol 1e-9)", opts.det_samples),
    ));

    let fields = match &opts.fixture {
        Some(g) => (1..=h.num_levels())
            .map(|l| LevelDeformationField {
                level: l,
                gradients: vec![*g; h.level(l).len()],
            })
            .collect(),
        None => random_fields(h, &mut rng, 0.2),
    };
    let result = propagate_recursive(h, &fields, scene)?;

    let loss = momentum_loss(h, &result.level_positions)?;
    let scale: f64 = (1..h.num_levels())
        .flat_map(|l| h.level(l).iter().zip(&result.level_positions[l]))
        .map(|(n, x)| (n.mass * x.norm()).powi(2))
        .sum();
    let rel = if scale > 0.0 { loss / scale } else { loss };
    groups.push(group("momentum", rel < 1e-20, format!("relative momentum loss {rel:.3e} (tol 1e-20)")));

    if h.num_levels() <= 2 {
        let mut worst = 0.0f64;
        for k in 0..scene.len() {
            let e = expanded_position(h, &fields, scene, k)?;
            worst = worst.max((e - result.positions[k]).amax());
        }
        groups.push(group(
            "recursive-expanded",
            worst < 1e-9,
            format!("max |recursive - expanded| = {worst:.3e} (tol 1e-9)"),
        ));
    } else {
        groups.push(group(
            "recursive-expanded",
            true,
            format!("skipped: closed form covers L <= 2, hierarchy has L = {}", h.num_levels()),
        ));
    }

    let mut worst_m = 0.0f64;
    let mut worst_x = 0.0f64;
    let step = (scene.len() / opts.integral_kernels.max(1)).max(1);
    for k in (0..scene.len()).step_by(step).take(opts.integral_kernels) {
        let kern = &scene.kernels[k];
        let attrs = &scene.attributes[k];
        let m = kernel_mass(kern, &scene.attributes[k])?;
        let (mi, xi) = integrate_kernel(kern, attrs.density, opts.integral_cells);
        worst_m = worst_m.max(((mi - m) / m).abs());
        let sd = kern.covariance.trace().sqrt();
        worst_x = worst_x.max((xi - kern.position).norm() / kern.position.norm().max(sd));
    }
    groups.push(group(
        "cms-integrals",
        worst_m < 1e-3 && worst_x < 1e-3,
        format!("mass rel err {worst_m:.3e}, barycenter rel err {worst_x:.3e} (tol 1e-3)"),
    ));

    let report = conservation_check(h, &result)?;
    let (dv, dm) = (report.max_volume_drift(), report.max_mass_drift());
    groups.push(group(
        "conservation",
        dv < 1e-9 && dm < 1e-9,
        format!("volume drift {dv:.3e}, mass drift {dm:.3e} (tol 1e-9)"),
    ));

    Ok(ValidationReport { groups })
}

/// `det F` of a gradient fixture.
pub fn fixture_det(g: &PolarSvdGradient) -> f64 {
    let f: Mat3 = compose(g);
    f.determinant()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::build_hierarchy;
    use crate::synth::{generate_synthetic_scene, SceneShape, SynthSpec};

    fn beam() -> (SceneTemplate, Hierarchy) {
        let s = generate_synthetic_scene(&SynthSpec { shape: SceneShape::Beam, count: 600, spacing: 0.02, seed: 0 }).unwrap();
        let h = build_hierarchy(&s, &[0.04, 0.5]).unwrap();
        (s, h)
    }

    fn fast() -> ValidateOptions {
        ValidateOptions { det_samples: 500, integral_kernels: 2, integral_cells: 32, ..Default::default() }
    }

    #[test]
    fn beam_passes() {
        let (s, h) = beam();
        let r = run_validation(&s, &h, &fast()).unwrap();
        assert!(r.all_passed(), "{r}");
        assert_eq!(r.groups.len(), 6);
    }

    #[test]
    fn stretch_fixture_fails_volume() {
        let (s, h) = beam();
        let opts = ValidateOptions { fixture: Some(PolarSvdGradient::stretch(Vec3::new(1.2, 1.0, 1.0))), ..fast() };
        let r = run_validation(&s, &h, &opts).unwrap();
        let fails = r.failures();
        assert_eq!(fails.len(), 1, "{r}");
        assert_eq!(fails[0].name, "conservation");
        assert!(fails[0].detail.contains("volume drift"));
    }

    #[test]
    fn integration_oracle() {
        let mut k = GaussianKernel::isotropic(Vec3::new(1.0, -2.0, 0.5), 0.3);
        k.covariance[(0, 1)] = 0.02;
        k.covariance[(1, 0)] = 0.02;
        let (m, x) = integrate_kernel(&k, 2.0, 40);
        let det = (k.covariance * std::f64::consts::TAU).determinant().sqrt();
        assert!(((m - 2.0 * det) / m).abs() < 1e-6);
        assert!((x - k.position).norm() < 1e-9);
    }

    #[test]
    fn random_quats_are_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let q = random_quat(&mut rng);
            assert!((q.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-14);
        }
        assert!((fixture_det(&random_gradient(&mut rng, 0.5, true)) - 1.0).abs() < 1e-12);
    }
}
