//! Conservation diagnostics and loss terms.

use serde::{Deserialize, Serialize};

use crate::hierarchy::Hierarchy;
use crate::propagation::{composed_gradients, kernel_positions, node_transforms, check_fields, PropagationResult};
use crate::providers::{GradientProvider, ProviderInput};
use crate::splat::covariance_volume;
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub momentum_loss: f64,
    pub static_residual: Option<f64>,
    /// Relative drift of total mass per level `0..=L`.
    pub mass_drift: Vec<f64>,
    /// Relative drift of total volume per level `0..=L`.
    pub volume_drift: Vec<f64>,
}

impl ConstraintReport {
    pub fn max_volume_drift(&self) -> f64 {
        self.volume_drift.iter().fold(0.0, |a, b| a.max(*b))
    }

    pub fn max_mass_drift(&self) -> f64 {
        self.mass_drift.iter().fold(0.0, |a, b| a.max(*b))
    }
}

fn check_positions(h: &Hierarchy, positions: &[Vec<Vec3>]) -> Result<usize> {
    // parents come from levels 1..L-1, children from 0..L-2
    let top = h.num_levels().saturating_sub(1);
    if top == 0 {
        return Ok(0);
    }
    if positions.len() <= top {
        return Err(Error::shape(format!(
            "momentum loss needs positions for levels 0..={top}, got {}",
            positions.len()
        )));
    }
    for l in 0..=top {
        if positions[l].len() != h.level(l).len() {
            return Err(Error::shape(format!(
                "level {l}: {} positions for {} nodes",
                positions[l].len(),
                h.level(l).len()
            )));
        }
    }
    Ok(top)
}

fn momentum_residuals(h: &Hierarchy, positions: &[Vec<Vec3>], top: usize) -> Vec<Vec<Vec3>> {
    (1..=top)
        .map(|l| {
            let lower = h.level(l - 1);
            h.level(l)
                .iter()
                .enumerate()
                .map(|(c, node)| {
                    let mut r = positions[l][c] * node.mass;
                    for &i in &node.children {
                        r -= positions[l - 1][i] * lower[i].mass;
                    }
                    r
                })
                .collect()
        })
        .collect()
}

/// `Σ_{l=1}^{L-1} Σ_c ‖m_c x̂_c − Σ_{i∈children(c)} m_i x̂_i‖²`.
///
/// `positions[l]` holds node positions at level `l` (level 0 = kernels);
/// entries past level `L − 1` are ignored.
pub fn momentum_loss(h: &Hierarchy, positions: &[Vec<Vec3>]) -> Result<f64> {
    let top = check_positions(h, positions)?;
    Ok(momentum_residuals(h, positions, top)
        .iter()
        .flatten()
        .map(|r| r.norm_squared())
        .sum())
}

/// Loss value and its gradient w.r.t. `positions[l]` for levels `0..L`.
/// Gradient rows for levels that do not enter the loss are zero.
pub fn momentum_loss_grad(h: &Hierarchy, positions: &[Vec<Vec3>]) -> Result<(f64, Vec<Vec<Vec3>>)> {
    let top = check_positions(h, positions)?;
    let res = momentum_residuals(h, positions, top);
    let mut grad: Vec<Vec<Vec3>> = positions.iter().map(|p| vec![Vec3::zeros(); p.len()]).collect();
    let mut loss = 0.0;
    for l in 1..=top {
        let lower = h.level(l - 1);
        for (c, node) in h.level(l).iter().enumerate() {
            let r = res[l - 1][c];
            loss += r.norm_squared();
            grad[l][c] += r * (2.0 * node.mass);
            for &i in &node.children {
                grad[l - 1][i] -= r * (2.0 * lower[i].mass);
            }
        }
    }
    Ok((loss, grad))
}

/// Diagonal of the momentum-loss Hessian per position (same layout as the
/// gradient); zero where a position does not enter the loss.
pub fn momentum_hessian_diagonal(h: &Hierarchy, positions: &[Vec<Vec3>]) -> Result<Vec<Vec<f64>>> {
    let top = check_positions(h, positions)?;
    let mut diag: Vec<Vec<f64>> = positions.iter().map(|p| vec![0.0; p.len()]).collect();
    for l in 1..=top {
        let lower = h.level(l - 1);
        for (c, node) in h.level(l).iter().enumerate() {
            diag[l][c] += 2.0 * node.mass * node.mass;
            for &i in &node.children {
                diag[l - 1][i] += 2.0 * lower[i].mass * lower[i].mass;
            }
        }
    }
    Ok(diag)
}

/// Static input: every history slice equals the template.
pub fn static_input(h: &Hierarchy, dt: f64) -> (Vec<Vec<Vec3>>, f64) {
    (h.template_positions(), dt)
}

/// `Σ_k ‖x̂_{k,0} − x_{k,0}‖²` for the provider's prediction from a static state.
pub fn static_residual(h: &Hierarchy, provider: &dyn GradientProvider, dt: f64) -> Result<f64> {
    let (template, dt) = static_input(h, dt);
    let input = ProviderInput::new(h, 0, dt, &template, &template, &template)?;
    let fields = provider.predict(&input)?;
    check_fields(h, &fields)?;
    let t = node_transforms(h, &composed_gradients(&fields));
    let xs = kernel_positions(h, &t);
    Ok(residual(&xs, &template[0]))
}

/// `Σ_k ‖a_k − b_k‖²`.
pub fn residual(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum()
}

/// Per-level relative drifts of total mass and volume for a propagation
/// result. Level 0 measures the deformed kernel covariances; level `l ≥ 1`
/// scales each CMS volume by the determinant of its accumulated gradient.
pub fn conservation_check(h: &Hierarchy, result: &PropagationResult) -> Result<ConstraintReport> {
    if result.covariances.len() != h.kernel_count() {
        return Err(Error::shape("result does not match hierarchy"));
    }
    let rel = |now: f64, then: f64| ((now - then) / then).abs();
    let mut mass_drift = Vec::new();
    let mut volume_drift = Vec::new();

    let (mut m, mut v) = (0.0, 0.0);
    for (node, cov) in h.level(0).iter().zip(&result.covariances) {
        let vol = covariance_volume(cov).ok_or(Error::NotSpd)?;
        v += vol;
        m += node.density * vol;
    }
    mass_drift.push(rel(m, h.total_mass(0)));
    volume_drift.push(rel(v, h.total_volume(0)));

    for l in 1..=h.num_levels() {
        let (mut m, mut v) = (0.0, 0.0);
        for (node, det) in h.level(l).iter().zip(&result.accumulated_dets[l]) {
            v += det * node.volume;
            m += det * node.mass;
        }
        mass_drift.push(rel(m, h.total_mass(l)));
        volume_drift.push(rel(v, h.total_volume(l)));
    }

    Ok(ConstraintReport {
        momentum_loss: momentum_loss(h, &result.level_positions)?,
        static_residual: None,
        mass_drift,
        volume_drift,
    })
}
