//! Node and edge features of the learned predictor.
//!
//! All dynamic features vanish for a static history, so the network sees an
//! all-zero dynamic input at rest.

use serde::{Deserialize, Serialize};

use super::ProviderInput;
use crate::grid::SpatialGrid;
use crate::{Error, Mat3, Result, Vec3};

pub const NODE_DYN_DIM: usize = 21;
pub const EDGE_DYN_DIM: usize = 8;
pub const EDGE_CTX_DIM: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    /// `−(x_t − 2x_{t−1} + x_{t−2}) / dt²`.
    pub cms_acceleration: Vec3,
    /// Per child: `((x_k,t − x_c,t) − (x_k,t−1 − x_c,t−1)) / dt`.
    pub component_local_velocities: Vec<Vec3>,
    pub attribute_vector: Vec<f64>,
    /// Least-squares fit `v_k ≈ G (X_k − X_c)` of the local velocities.
    pub velocity_gradient: Mat3,
    /// Least-squares fit `(x_k − x_c) − (X_k − X_c) ≈ D (X_k − X_c)`.
    pub displacement_gradient: Mat3,
}

impl NodeFeatures {
    pub fn dynamic_vector(&self) -> [f64; NODE_DYN_DIM] {
        let mut out = [0.0; NODE_DYN_DIM];
        out[..3].copy_from_slice(self.cms_acceleration.as_slice());
        out[3..12].copy_from_slice(self.velocity_gradient.as_slice());
        out[12..].copy_from_slice(self.displacement_gradient.as_slice());
        out
    }
}

fn fit_inverse(offsets: &[Vec3]) -> Mat3 {
    let s: Mat3 = offsets.iter().map(|y| y * y.transpose()).sum();
    let eps = 1e-3 * s.trace() / 3.0 + 1e-18;
    (s + Mat3::identity() * eps)
        .try_inverse()
        .unwrap_or_else(Mat3::zeros)
}

/// Node features for every node at `level ≥ 1`.
pub fn node_features(input: &ProviderInput, level: usize) -> Result<Vec<NodeFeatures>> {
    let h = input.hierarchy;
    if level == 0 || level > h.num_levels() {
        return Err(Error::invalid(format!("no CMS level {level}")));
    }
    let dt = input.dt;
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    let (cur, prev, early) = (input.current, input.previous, input.earlier);
    let lower = h.level(level - 1);
    Ok(h.level(level)
        .iter()
        .enumerate()
        .map(|(c, node)| {
            let acc = -(cur[level][c] - prev[level][c] * 2.0 + early[level][c]) / (dt * dt);
            let mut velocities = Vec::with_capacity(node.children.len());
            let mut template = Vec::with_capacity(node.children.len());
            let mut vel_outer = Mat3::zeros();
            let mut disp_outer = Mat3::zeros();
            for &i in &node.children {
                let now = cur[level - 1][i] - cur[level][c];
                let before = prev[level - 1][i] - prev[level][c];
                let v = (now - before) / dt;
                let y = lower[i].position - node.position;
                vel_outer += v * y.transpose();
                disp_outer += (now - y) * y.transpose();
                velocities.push(v);
                template.push(y);
            }
            let inv = fit_inverse(&template);
            NodeFeatures {
                cms_acceleration: acc,
                component_local_velocities: velocities,
                attribute_vector: node.attribute_vector.clone(),
                velocity_gradient: vel_outer * inv,
                displacement_gradient: disp_outer * inv,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeFeatures {
    /// `‖x_d − x_s‖ / ‖X_d − X_s‖`.
    pub deformation_ratio: f64,
    /// Deformed unit direction from source to destination.
    pub direction: Vec3,
    pub relative_velocity: Vec3,
    /// Deformed minus template angle between source and destination, seen
    /// from the barycenter.
    pub relative_angle_delta: f64,
    pub template_direction: Vec3,
}

impl EdgeFeatures {
    pub fn dynamic_vector(&self) -> [f64; EDGE_DYN_DIM] {
        let d = self.direction - self.template_direction;
        let v = self.relative_velocity;
        [
            self.deformation_ratio - 1.0,
            d.x,
            d.y,
            d.z,
            v.x,
            v.y,
            v.z,
            self.relative_angle_delta,
        ]
    }
}

/// Positions of one edge's endpoints and its reference barycenter in the
/// template (`*_ref`), at `t` (`*_now`) and at `t − 1` (`*_prev`).
#[derive(Debug, Clone, Copy)]
pub struct EdgeGeometry {
    pub source_ref: Vec3,
    pub dest_ref: Vec3,
    pub barycenter_ref: Vec3,
    pub source_now: Vec3,
    pub dest_now: Vec3,
    pub barycenter_now: Vec3,
    pub source_prev: Vec3,
    pub dest_prev: Vec3,
}

fn angle_at(b: &Vec3, s: &Vec3, d: &Vec3, scale: f64) -> Option<f64> {
    let (a, c) = (s - b, d - b);
    let (na, nc) = (a.norm(), c.norm());
    if na <= 1e-12 * scale || nc <= 1e-12 * scale {
        return None;
    }
    Some((a.dot(&c) / (na * nc)).clamp(-1.0, 1.0).acos())
}

pub fn edge_features(g: &EdgeGeometry, dt: f64) -> Result<EdgeFeatures> {
    let reference = g.dest_ref - g.source_ref;
    let len_ref = reference.norm();
    if !(len_ref > 0.0) {
        return Err(Error::invalid("edge joins coincident template nodes"));
    }
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    let now = g.dest_now - g.source_now;
    let len_now = now.norm();
    let direction = if len_now > 0.0 { now / len_now } else { Vec3::zeros() };
    let before = g.dest_prev - g.source_prev;
    let delta = match (
        angle_at(&g.barycenter_now, &g.source_now, &g.dest_now, len_ref),
        angle_at(&g.barycenter_ref, &g.source_ref, &g.dest_ref, len_ref),
    ) {
        (Some(a), Some(b)) => a - b,
        _ => 0.0,
    };
    Ok(EdgeFeatures {
        deformation_ratio: len_now / len_ref,
        direction,
        relative_velocity: (now - before) / dt,
        relative_angle_delta: delta,
        template_direction: reference / len_ref,
    })
}

/// Edge thresholds as multiples of the level's clustering radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgeConfig {
    pub material_factor: f64,
    pub deformed_factor: f64,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self {
            material_factor: 2.0,
            deformed_factor: 3.0,
        }
    }
}

/// Dense network input for all CMS nodes of levels `1..=L`, stacked level by
/// level (level `l` starts at row `offsets[l − 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFeatures {
    pub n_nodes: usize,
    pub offsets: Vec<usize>,
    pub node_dyn: Vec<f64>,
    pub node_ctx: Vec<f64>,
    pub node_ctx_dim: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub edge_dyn: Vec<f64>,
    pub edge_ctx: Vec<f64>,
}

impl GraphFeatures {
    pub fn n_edges(&self) -> usize {
        self.src.len()
    }
}

/// Directed same-level edges (both directions) between nodes within
/// `material_factor·r` in the template and `deformed_factor·r` at `t`.
pub fn level_edges(input: &ProviderInput, level: usize, config: &EdgeConfig) -> Vec<(usize, usize)> {
    let h = input.hierarchy;
    let r = h.radii[level - 1];
    let template: Vec<Vec3> = h.level(level).iter().map(|n| n.position).collect();
    let reach = config.material_factor * r;
    let deformed = config.deformed_factor * r;
    let grid = SpatialGrid::new(&template, reach);
    let now = &input.current[level];
    let mut edges = Vec::new();
    for s in 0..template.len() {
        for d in grid.within(&template, &template[s], reach) {
            if d != s && (now[d] - now[s]).norm() <= deformed {
                edges.push((s, d));
            }
        }
    }
    edges
}

pub fn build_graph(input: &ProviderInput, config: &EdgeConfig) -> Result<GraphFeatures> {
    let h = input.hierarchy;
    let levels = h.num_levels();
    if levels == 0 {
        return Err(Error::invalid("the predictor needs at least one CMS level"));
    }
    let attr_dim = h.level(0).first().map_or(0, |n| n.attribute_vector.len());
    let ctx_dim = attr_dim + levels;
    let xr = h.root_position();

    let mut g = GraphFeatures {
        n_nodes: 0,
        offsets: Vec::with_capacity(levels),
        node_dyn: Vec::new(),
        node_ctx: Vec::new(),
        node_ctx_dim: ctx_dim,
        src: Vec::new(),
        dst: Vec::new(),
        edge_dyn: Vec::new(),
        edge_ctx: Vec::new(),
    };
    for l in 1..=levels {
        let offset = g.n_nodes;
        g.offsets.push(offset);
        for f in node_features(input, l)? {
            g.node_dyn.extend_from_slice(&f.dynamic_vector());
            g.node_ctx.extend_from_slice(&f.attribute_vector);
            g.node_ctx.extend((1..=levels).map(|j| if j == l { 1.0 } else { 0.0 }));
        }
        let nodes = h.level(l);
        let r = h.radii[l - 1];
        let barycenters = |d: usize| -> (Vec3, Vec3) {
            match nodes[d].parent {
                Some(p) if l < levels => (h.level(l + 1)[p].position, input.current[l + 1][p]),
                _ => (xr, xr),
            }
        };
        for (s, d) in level_edges(input, l, config) {
            let (b_ref, b_now) = barycenters(d);
            let geo = EdgeGeometry {
                source_ref: nodes[s].position,
                dest_ref: nodes[d].position,
                barycenter_ref: b_ref,
                source_now: input.current[l][s],
                dest_now: input.current[l][d],
                barycenter_now: b_now,
                source_prev: input.previous[l][s],
                dest_prev: input.previous[l][d],
            };
            let e = edge_features(&geo, input.dt)?;
            g.edge_dyn.extend_from_slice(&e.dynamic_vector());
            let rel = (geo.dest_ref - geo.source_ref) / r;
            g.edge_ctx.extend_from_slice(e.template_direction.as_slice());
            g.edge_ctx.extend_from_slice(rel.as_slice());
            g.src.push(offset + s);
            g.dst.push(offset + d);
        }
        g.n_nodes += nodes.len();
    }
    if g.node_dyn.iter().chain(&g.edge_dyn).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("predictor features".into()));
    }
    Ok(g)
}
