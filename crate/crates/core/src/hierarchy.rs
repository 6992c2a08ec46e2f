//! Bottom-up construction of Center-of-Mass Systems.
//!
//! Level 0 aliases the Gaussian kernels. Each higher level clusters the nodes
//! of the level below by distance (greedy radius balls in index order) and
//! aggregates them: mass-weighted barycenter, summed mass and volume, density
//! as their ratio, and the unweighted mean of the attribute vectors.
//!
//! The root kernel is kept as a singleton CMS at every level (node 0 of each
//! level ≥ 1), so that the anchor stays fixed under any predicted gradients.

use serde::{Deserialize, Serialize};

use crate::grid::SpatialGrid;
use crate::splat::{kernel_mass, kernel_volume, SceneTemplate};
use crate::{Error, Result, Vec3};

/// Level-1 and level-2 clustering radii in scene units.
pub const DEFAULT_RADII: [f64; 2] = [0.04, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmsNode {
    pub level: usize,
    /// Mass-weighted barycenter in material space.
    pub position: Vec3,
    pub mass: f64,
    pub volume: f64,
    pub density: f64,
    pub attribute_vector: Vec<f64>,
    /// Indices into level `level - 1`; empty at level 0.
    pub children: Vec<usize>,
    /// Index into level `level + 1`; `None` at the top level.
    pub parent: Option<usize>,
}

impl CmsNode {
    /// A level-0 node (one kernel).
    pub fn leaf(position: Vec3, mass: f64, volume: f64, attribute_vector: Vec<f64>) -> Self {
        Self {
            level: 0,
            position,
            mass,
            volume,
            density: mass / volume,
            attribute_vector,
            children: Vec::new(),
            parent: None,
        }
    }
}

/// Mass-weighted barycenter, computed relative to the first point so that a
/// single point maps to itself bit-exactly.
pub fn barycenter(points: impl IntoIterator<Item = (Vec3, f64)>) -> (Vec3, f64) {
    let mut iter = points.into_iter();
    let Some((first, m0)) = iter.next() else {
        return (Vec3::zeros(), 0.0);
    };
    let mut weighted = Vec3::zeros();
    let mut total = m0;
    for (p, m) in iter {
        weighted += (p - first) * m;
        total += m;
    }
    (first + weighted / total, total)
}

/// Aggregates `child_ids` of `lower` into one CMS at `level`.
pub fn build_cms(lower: &[CmsNode], child_ids: &[usize], level: usize) -> Result<CmsNode> {
    if child_ids.is_empty() {
        return Err(Error::invalid("a CMS needs at least one child"));
    }
    let mut volume = 0.0;
    let dim = lower[child_ids[0]].attribute_vector.len();
    let mut attribute_vector = vec![0.0; dim];
    for &c in child_ids {
        let child = lower
            .get(c)
            .ok_or_else(|| Error::invalid(format!("child index {c} out of range")))?;
        if !(child.mass > 0.0) || !(child.volume > 0.0) {
            return Err(Error::invalid(format!(
                "child {c} has non-positive mass or volume"
            )));
        }
        if child.attribute_vector.len() != dim {
            return Err(Error::shape("children disagree on attribute dimension"));
        }
        volume += child.volume;
        for (a, v) in attribute_vector.iter_mut().zip(&child.attribute_vector) {
            *a += v;
        }
    }
    let n = child_ids.len() as f64;
    attribute_vector.iter_mut().for_each(|a| *a /= n);
    let (position, mass) = barycenter(child_ids.iter().map(|&c| (lower[c].position, lower[c].mass)));
    Ok(CmsNode {
        level,
        position,
        mass,
        volume,
        density: mass / volume,
        attribute_vector,
        children: child_ids.to_vec(),
        parent: None,
    })
}

/// Greedy radius-ball clustering.
///
/// Points are visited in ascending index order; the first unassigned point
/// seeds a new cluster that absorbs every unassigned point within `radius`
/// (inclusive) of the seed. Returns one cluster id per point, ids numbered in
/// seed order.
pub fn cluster_level(positions: &[Vec3], radius: f64) -> Result<Vec<usize>> {
    if positions.is_empty() {
        return Ok(Vec::new());
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::invalid(format!("clustering radius must be positive, got {radius}")));
    }
    if let Some(i) = positions.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite(format!("position {i}")));
    }
    let grid = SpatialGrid::new(positions, radius);
    let mut assignment = vec![usize::MAX; positions.len()];
    let mut next = 0;
    for seed in 0..positions.len() {
        if assignment[seed] != usize::MAX {
            continue;
        }
        let center = positions[seed];
        grid.for_each_candidate(&center, radius, |i| {
            if assignment[i] == usize::MAX && (positions[i] - center).norm() <= radius {
                assignment[i] = next;
            }
        });
        next += 1;
    }
    Ok(assignment)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    /// `levels[0]` are the kernels, `levels[L]` the coarsest CMSs.
    pub levels: Vec<Vec<CmsNode>>,
    /// Clustering radius used to build each level `1..=L` (`radii[l - 1]`).
    pub radii: Vec<f64>,
    pub root_kernel_id: usize,
    /// Index of the root kernel's ancestor at every level.
    pub root_chain: Vec<usize>,
    /// `ancestors[j][k]`: node at level `j` containing kernel `k`.
    #[serde(skip)]
    ancestors: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HierarchyStats {
    pub n_kernels: usize,
    pub predictions: usize,
    pub ratio: f64,
}

impl HierarchyStats {
    /// Stats from per-level node counts `[|level 0|, |level 1|, ..., |level L|]`.
    pub fn from_level_counts(counts: &[usize]) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::invalid(
                "no predictions are defined for a hierarchy without CMS levels",
            ));
        }
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::invalid("empty hierarchy level"));
        }
        let n_kernels = counts[0];
        let predictions: usize = counts[1..].iter().sum();
        Ok(Self {
            n_kernels,
            predictions,
            ratio: predictions as f64 / n_kernels as f64,
        })
    }
}

/// `N_K · Σ_i (Π_{j≤i} γ_j)⁻¹` with `γ_j = |level j-1| / |level j|`.
pub fn predictions_from_branching(counts: &[usize]) -> f64 {
    let n_k = counts[0] as f64;
    let mut product = 1.0;
    let mut sum = 0.0;
    for w in counts.windows(2) {
        product *= w[0] as f64 / w[1] as f64;
        sum += 1.0 / product;
    }
    n_k * sum
}

pub fn prediction_count(h: &Hierarchy) -> Result<HierarchyStats> {
    HierarchyStats::from_level_counts(&h.level_counts())
}

pub fn build_hierarchy(scene: &SceneTemplate, radii: &[f64]) -> Result<Hierarchy> {
    scene.validate()?;
    if let Some(r) = radii.iter().find(|r| !(**r > 0.0) || !r.is_finite()) {
        return Err(Error::config(format!("clustering radius {r} must be positive")));
    }
    if radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config(format!(
            "clustering radii must be strictly increasing, got {radii:?}"
        )));
    }
    let leaves = leaf_nodes(scene)?;
    let root = scene.root_kernel_id;
    let mut levels = vec![leaves];
    let mut root_chain = vec![root];

    for (i, &radius) in radii.iter().enumerate() {
        let level = i + 1;
        let lower = levels.last().expect("level 0 exists");
        let lower_root = *root_chain.last().expect("root chain");

        let others: Vec<usize> = (0..lower.len()).filter(|&n| n != lower_root).collect();
        let positions: Vec<Vec3> = others.iter().map(|&n| lower[n].position).collect();
        let assignment = cluster_level(&positions, radius)?;
        let n_clusters = assignment.iter().max().map_or(0, |m| m + 1);

        let mut groups: Vec<Vec<usize>> = vec![vec![lower_root]];
        groups.extend(std::iter::repeat_with(Vec::new).take(n_clusters));
        for (slot, cluster) in assignment.iter().enumerate() {
            groups[cluster + 1].push(others[slot]);
        }

        let nodes = groups
            .iter()
            .map(|g| build_cms(lower, g, level))
            .collect::<Result<Vec<_>>>()?;
        levels.push(nodes);
        root_chain.push(0);
    }
    Ok(Hierarchy::from_levels(levels, radii.to_vec(), root, root_chain))
}

fn leaf_nodes(scene: &SceneTemplate) -> Result<Vec<CmsNode>> {
    scene
        .kernels
        .iter()
        .zip(&scene.attributes)
        .enumerate()
        .map(|(i, (k, a))| {
            let volume = kernel_volume(k).map_err(|_| Error::NonSpd { index: i })?;
            let mass = kernel_mass(k, a)?;
            Ok(CmsNode::leaf(k.position, mass, volume, a.attribute_vector.clone()))
        })
        .collect()
}

impl Hierarchy {
    /// Links parents and precomputes ancestor tables for already-built levels.
    pub fn from_levels(
        mut levels: Vec<Vec<CmsNode>>,
        radii: Vec<f64>,
        root_kernel_id: usize,
        root_chain: Vec<usize>,
    ) -> Self {
        for l in 1..levels.len() {
            let (lower, upper) = levels.split_at_mut(l);
            for (p, node) in upper[0].iter().enumerate() {
                for &c in &node.children {
                    lower[l - 1][c].parent = Some(p);
                }
            }
        }
        let mut h = Self {
            levels,
            radii,
            root_kernel_id,
            root_chain,
            ancestors: Vec::new(),
        };
        h.rebuild_ancestors();
        h
    }

    /// One level in which every kernel is its own CMS; used as the flat
    /// per-kernel prediction baseline. `radius` sets the neighborhood scale.
    pub fn flat(scene: &SceneTemplate, radius: f64) -> Result<Self> {
        let leaves = leaf_nodes(scene)?;
        let upper = (0..leaves.len())
            .map(|i| build_cms(&leaves, &[i], 1))
            .collect::<Result<Vec<_>>>()?;
        let root = scene.root_kernel_id;
        Ok(Self::from_levels(
            vec![leaves, upper],
            vec![radius],
            root,
            vec![root, root],
        ))
    }

    pub(crate) fn rebuild_ancestors(&mut self) {
        let n = self.levels[0].len();
        let mut ancestors = vec![(0..n).collect::<Vec<_>>()];
        for l in 1..self.levels.len() {
            let prev = &ancestors[l - 1];
            let row = prev
                .iter()
                .map(|&a| self.levels[l - 1][a].parent.expect("every non-top node has a parent"))
                .collect();
            ancestors.push(row);
        }
        self.ancestors = ancestors;
    }

    /// Number of CMS levels `L` above the kernels.
    pub fn num_levels(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn kernel_count(&self) -> usize {
        self.levels[0].len()
    }

    pub fn level(&self, l: usize) -> &[CmsNode] {
        &self.levels[l]
    }

    pub fn level_counts(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }

    /// Node at level `level` that contains kernel `kernel`.
    pub fn ancestor(&self, level: usize, kernel: usize) -> usize {
        self.ancestors[level][kernel]
    }

    pub fn root_position(&self) -> Vec3 {
        self.levels[0][self.root_kernel_id].position
    }

    /// Material-space positions of every level.
    pub fn template_positions(&self) -> Vec<Vec<Vec3>> {
        self.levels
            .iter()
            .map(|lvl| lvl.iter().map(|n| n.position).collect())
            .collect()
    }

    pub fn total_mass(&self, level: usize) -> f64 {
        self.levels[level].iter().map(|n| n.mass).sum()
    }

    pub fn total_volume(&self, level: usize) -> f64 {
        self.levels[level].iter().map(|n| n.volume).sum()
    }

    /// Mass-weighted barycenters of all levels for given kernel positions.
    pub fn barycenters(&self, kernel_positions: &[Vec3]) -> Vec<Vec<Vec3>> {
        let mut out = vec![kernel_positions.to_vec()];
        for l in 1..self.levels.len() {
            let lower = &out[l - 1];
            let lower_nodes = &self.levels[l - 1];
            let row = self.levels[l]
                .iter()
                .map(|n| {
                    barycenter(n.children.iter().map(|&c| (lower[c], lower_nodes[c].mass))).0
                })
                .collect();
            out.push(row);
        }
        out
    }

    /// Checks partition, aggregation and ancestor-table invariants.
    pub fn check_invariants(&self) -> Result<()> {
        for l in 1..self.levels.len() {
            let mut seen = vec![0usize; self.levels[l - 1].len()];
            for (p, node) in self.levels[l].iter().enumerate() {
                let expect = build_cms(&self.levels[l - 1], &node.children, l)?;
                let tol = 1e-12 * expect.mass.max(1.0);
                if (expect.mass - node.mass).abs() > tol
                    || (expect.volume - node.volume).abs() > 1e-12 * expect.volume.max(1.0)
                    || (expect.position - node.position).amax() > 1e-9
                {
                    return Err(Error::invalid(format!("level {l} node {p} is not its children's CMS")));
                }
                for &c in &node.children {
                    seen[c] += 1;
                    if self.levels[l - 1][c].parent != Some(p) {
                        return Err(Error::invalid(format!("level {} node {c} has wrong parent", l - 1)));
                    }
                }
            }
            if let Some(c) = seen.iter().position(|&s| s != 1) {
                return Err(Error::invalid(format!(
                    "level {} node {c} appears in {} parents",
                    l - 1,
                    seen[c]
                )));
            }
        }
        Ok(())
    }
}
