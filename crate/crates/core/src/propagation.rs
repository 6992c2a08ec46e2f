//! Coarse-to-fine application of per-level deformation gradients.
//!
//! Positions are always computed from the material-space template. With
//! `M` the accumulated gradient of a node (`M_top = F_top`,
//! `M_n = F_n·M_parent`):
//!
//! ```text
//! top node n:        x_n = x_r + F_n (X_n - x_r)
//! node n, parent p:  x_n = x_p + M_p (X_n - X_p)
//! kernel k, CMS c:   x_k = x_c + M_c (X_k - X_c),   σ_k = M_c Σ_k M_cᵀ
//! ```
//!
//! which is the level-by-level recursion (see [`apply_level`]) evaluated once
//! per node and shared by all kernels of a level-1 CMS.

use serde::{Deserialize, Serialize};

use crate::deformation::{compose, deformation_rotation, transform_covariance, PolarSvdGradient};
use crate::hierarchy::Hierarchy;
use crate::splat::SceneTemplate;
use crate::{Error, Mat3, Result, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelDeformationField {
    pub level: usize,
    pub gradients: Vec<PolarSvdGradient>,
}

impl LevelDeformationField {
    pub fn identity(level: usize, n: usize) -> Self {
        Self {
            level,
            gradients: vec![PolarSvdGradient::identity(); n],
        }
    }
}

/// Identity fields for every level of `h`.
pub fn identity_fields(h: &Hierarchy) -> Vec<LevelDeformationField> {
    (1..=h.num_levels())
        .map(|l| LevelDeformationField::identity(l, h.level(l).len()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationResult {
    pub positions: Vec<Vec3>,
    pub covariances: Vec<Mat3>,
    /// Accumulated color rotation `R¹R²…Rᴸ`; SH is evaluated at `Rᵀd`.
    pub rotations: Vec<Mat3>,
    /// Deformed node positions for levels `0..=L` (level 0 = kernels).
    pub level_positions: Vec<Vec<Vec3>>,
    /// `det M` of every node's accumulated gradient, levels `1..=L` (index 0 empty).
    pub accumulated_dets: Vec<Vec<f64>>,
}

/// Per-node deformed positions and accumulated gradients for levels `1..=L`
/// (index 0 is unused and empty).
#[derive(Debug, Clone)]
pub struct NodeTransforms {
    pub positions: Vec<Vec<Vec3>>,
    pub accumulated: Vec<Vec<Mat3>>,
}

pub(crate) fn check_fields(h: &Hierarchy, fields: &[LevelDeformationField]) -> Result<()> {
    if fields.len() != h.num_levels() {
        return Err(Error::shape(format!(
            "expected {} deformation fields, got {}",
            h.num_levels(),
            fields.len()
        )));
    }
    for (i, f) in fields.iter().enumerate() {
        let l = i + 1;
        if f.level != l {
            return Err(Error::shape(format!("field {i} is for level {}, expected {l}", f.level)));
        }
        if f.gradients.len() != h.level(l).len() {
            return Err(Error::shape(format!(
                "level {l} has {} nodes but {} gradients",
                h.level(l).len(),
                f.gradients.len()
            )));
        }
        for (n, g) in f.gradients.iter().enumerate() {
            g.validate().map_err(|e| Error::ProviderOutput {
                level: l,
                node: n,
                reason: e.to_string(),
            })?;
        }
    }
    Ok(())
}

/// Composed `F` per node, `result[l - 1][n]`.
pub fn composed_gradients(fields: &[LevelDeformationField]) -> Vec<Vec<Mat3>> {
    fields
        .iter()
        .map(|f| f.gradients.iter().map(compose).collect())
        .collect()
}

/// Top-down pass over the CMS levels for composed gradients `fs[l - 1][n]`.
///
/// Positions are accumulated as displacements from the template,
/// `x_n = X_n + (x_p − X_p) + (M_p − I)(X_n − X_p)`, which equals
/// `x_p + M_p(X_n − X_p)` and reproduces the template exactly when every
/// gradient is the identity.
pub fn node_transforms(h: &Hierarchy, fs: &[Vec<Mat3>]) -> NodeTransforms {
    let levels = h.num_levels();
    let mut positions = vec![Vec::new(); levels + 1];
    let mut accumulated = vec![Vec::new(); levels + 1];
    if levels == 0 {
        return NodeTransforms { positions, accumulated };
    }
    let xr = h.root_position();
    positions[levels] = h
        .level(levels)
        .iter()
        .zip(&fs[levels - 1])
        .map(|(n, f)| n.position + (f - Mat3::identity()) * (n.position - xr))
        .collect();
    accumulated[levels] = fs[levels - 1].clone();
    for l in (1..levels).rev() {
        let upper = &h.levels[l + 1];
        let (pos, acc): (Vec<Vec3>, Vec<Mat3>) = h
            .level(l)
            .iter()
            .zip(&fs[l - 1])
            .map(|(n, f)| {
                let p = n.parent.expect("non-top node has a parent");
                let mp = accumulated[l + 1][p];
                let shift = positions[l + 1][p] - upper[p].position;
                (
                    n.position + shift + (mp - Mat3::identity()) * (n.position - upper[p].position),
                    f * mp,
                )
            })
            .unzip();
        positions[l] = pos;
        accumulated[l] = acc;
    }
    NodeTransforms { positions, accumulated }
}

/// Kernel positions only; the hot path for training and feature extraction.
pub fn kernel_positions(h: &Hierarchy, t: &NodeTransforms) -> Vec<Vec3> {
    if h.num_levels() == 0 {
        return h.level(0).iter().map(|n| n.position).collect();
    }
    let lvl1 = h.level(1);
    h.level(0)
        .iter()
        .enumerate()
        .map(|(k, n)| {
            let c = h.ancestor(1, k);
            let shift = t.positions[1][c] - lvl1[c].position;
            n.position + shift + (t.accumulated[1][c] - Mat3::identity()) * (n.position - lvl1[c].position)
        })
        .collect()
}

/// Canonical propagation of `fields` (one per level `1..=L`) onto `template`.
pub fn propagate_recursive(
    h: &Hierarchy,
    fields: &[LevelDeformationField],
    template: &SceneTemplate,
) -> Result<PropagationResult> {
    if template.len() != h.kernel_count() {
        return Err(Error::shape(format!(
            "template has {} kernels, hierarchy {}",
            template.len(),
            h.kernel_count()
        )));
    }
    check_fields(h, fields)?;
    let levels = h.num_levels();
    let fs = composed_gradients(fields);
    let t = node_transforms(h, &fs);
    let positions = kernel_positions(h, &t);

    // color rotations accumulate like the gradients: R_n = R_n·R_parent
    let mut rot: Vec<Vec<Mat3>> = vec![Vec::new(); levels + 1];
    for l in (1..=levels).rev() {
        rot[l] = fields[l - 1]
            .gradients
            .iter()
            .zip(h.level(l))
            .map(|(g, n)| {
                let r = deformation_rotation(g);
                match n.parent {
                    Some(p) if l < levels => r * rot[l + 1][p],
                    _ => r,
                }
            })
            .collect();
    }

    let mut covariances = Vec::with_capacity(template.len());
    let mut rotations = Vec::with_capacity(template.len());
    for (k, kernel) in template.kernels.iter().enumerate() {
        if levels == 0 {
            covariances.push(kernel.covariance);
            rotations.push(Mat3::identity());
            continue;
        }
        let c = h.ancestor(1, k);
        let cov = transform_covariance(&t.accumulated[1][c], &kernel.covariance)
            .map_err(|e| Error::invalid(format!("kernel {k}: {e}")))?;
        covariances.push(cov);
        rotations.push(rot[1][c]);
    }

    let accumulated_dets = t
        .accumulated
        .iter()
        .map(|lvl| lvl.iter().map(Mat3::determinant).collect())
        .collect();
    let mut level_positions = t.positions;
    level_positions[0] = positions.clone();
    Ok(PropagationResult {
        positions,
        covariances,
        rotations,
        level_positions,
        accumulated_dets,
    })
}

/// Reverse pass of [`node_transforms`] + [`kernel_positions`].
///
/// `kernel_grads` is dL/dx for kernel positions, `node_grads[l]` (optional,
/// levels `1..=L`) dL/dx for node positions. Returns dL/dF per node,
/// `result[l - 1][n]`.
pub fn propagate_backward(
    h: &Hierarchy,
    fs: &[Vec<Mat3>],
    t: &NodeTransforms,
    kernel_grads: &[Vec3],
    node_grads: Option<&[Vec<Vec3>]>,
) -> Vec<Vec<Mat3>> {
    let levels = h.num_levels();
    if levels == 0 {
        return Vec::new();
    }
    let mut dpos: Vec<Vec<Vec3>> = (0..=levels)
        .map(|l| match node_grads {
            Some(g) if l > 0 && !g[l].is_empty() => g[l].clone(),
            _ => vec![Vec3::zeros(); if l == 0 { 0 } else { h.level(l).len() }],
        })
        .collect();
    let mut dm: Vec<Vec<Mat3>> = (0..=levels)
        .map(|l| vec![Mat3::zeros(); if l == 0 { 0 } else { h.level(l).len() }])
        .collect();

    let lvl1 = h.level(1);
    for (k, (n, g)) in h.level(0).iter().zip(kernel_grads).enumerate() {
        let c = h.ancestor(1, k);
        dpos[1][c] += g;
        dm[1][c] += g * (n.position - lvl1[c].position).transpose();
    }

    let mut df: Vec<Vec<Mat3>> = (1..=levels).map(|l| vec![Mat3::zeros(); h.level(l).len()]).collect();
    for l in 1..levels {
        let upper = &h.levels[l + 1];
        for (i, n) in h.level(l).iter().enumerate() {
            let p = n.parent.expect("non-top node has a parent");
            let mp = t.accumulated[l + 1][p];
            let dmn = dm[l][i];
            let dpn = dpos[l][i];
            df[l - 1][i] = dmn * mp.transpose();
            dm[l + 1][p] += fs[l - 1][i].transpose() * dmn + dpn * (n.position - upper[p].position).transpose();
            dpos[l + 1][p] += dpn;
        }
    }
    let xr = h.root_position();
    for (i, n) in h.level(levels).iter().enumerate() {
        df[levels - 1][i] = dm[levels][i] + dpos[levels][i] * (n.position - xr).transpose();
    }
    df
}

/// One recursion step: `x̂_k ← x̂_c + F_c(x̂_k − x̂_c)` for each item `k` with
/// parent `c = child_to_parent[k]`.
pub fn apply_level(
    parent_positions: &[Vec3],
    child_positions: &[Vec3],
    child_to_parent: &[usize],
    gradients: &[Mat3],
) -> Result<Vec<Vec3>> {
    if child_positions.len() != child_to_parent.len() {
        return Err(Error::shape("one parent index per child required"));
    }
    if gradients.len() != parent_positions.len() {
        return Err(Error::shape("one gradient per parent required"));
    }
    child_positions
        .iter()
        .zip(child_to_parent)
        .enumerate()
        .map(|(k, (x, &c))| {
            let xc = parent_positions
                .get(c)
                .ok_or_else(|| Error::invalid(format!("child {k} references missing parent {c}")))?;
            Ok(xc + gradients[c] * (x - xc))
        })
        .collect()
}

/// Closed-form kernel position for `L ≤ 2`; a test oracle.
///
/// `L = 1`: `x_r + F¹(X_k − x_r)`.
/// `L = 2`: `x̂¹_c + F¹F²(X_k − X_c)` with `x̂¹_c = x_r + F²(X_c − x_r)`.
pub fn expanded_position(
    h: &Hierarchy,
    fields: &[LevelDeformationField],
    template: &SceneTemplate,
    k: usize,
) -> Result<Vec3> {
    check_fields(h, fields)?;
    let xk = template
        .kernels
        .get(k)
        .ok_or_else(|| Error::invalid(format!("kernel {k} out of range")))?
        .position;
    let xr = template.root_position();
    match h.num_levels() {
        0 => Ok(xk),
        1 => {
            let f1 = compose(&fields[0].gradients[h.ancestor(1, k)]);
            Ok(xr + f1 * (xk - xr))
        }
        2 => {
            let c1 = h.ancestor(1, k);
            let c2 = h.ancestor(2, k);
            let f1 = compose(&fields[0].gradients[c1]);
            let f2 = compose(&fields[1].gradients[c2]);
            let xc1 = h.level(1)[c1].position;
            let anchor = xr + f2 * (xc1 - xr);
            Ok(anchor + f1 * f2 * (xk - xc1))
        }
        l => Err(Error::invalid(format!("closed form only defined for L <= 2, got {l}"))),
    }
}

/// Gradients inherited by kernel `k`, ordered `[F¹, F², …, Fᴸ]`.
pub fn inherited_gradients(h: &Hierarchy, fields: &[LevelDeformationField], k: usize) -> Vec<Mat3> {
    (1..=h.num_levels())
        .map(|l| compose(&fields[l - 1].gradients[h.ancestor(l, k)]))
        .collect()
}

/// `(F¹F²…Fᴸ) Σ (F¹F²…Fᴸ)ᵀ` for `chain = [F¹, …, Fᴸ]`.
pub fn propagate_covariance(chain: &[Mat3], sigma: &Mat3) -> Result<Mat3> {
    let product = chain.iter().fold(Mat3::identity(), |acc, f| acc * f);
    transform_covariance(&product, sigma)
}

/// `(R¹R²…Rᴸ)ᵀ d` for `rotations = [R¹, …, Rᴸ]`.
pub fn propagate_color_direction(rotations: &[Mat3], d: &Vec3) -> Vec3 {
    let product = rotations.iter().fold(Mat3::identity(), |acc, r| acc * r);
    product.transpose() * d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deformation::{axis_angle_quat, quat_norm, IDENTITY_QUAT};
    use crate::hierarchy::build_hierarchy;
    use crate::splat::{kernel_volume, GaussianKernel, MaterialAttributes};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scene(rng: &mut impl Rng, n: usize) -> SceneTemplate {
        let kernels = (0..n)
            .map(|_| {
                let p = Vec3::from_fn(|_, _| rng.random_range(0.0..1.0));
                let a = Mat3::from_fn(|_, _| rng.random_range(-0.05..0.05));
                GaussianKernel::new(p, a * a.transpose() + Mat3::identity() * 1e-3, 1.0)
            })
            .collect();
        let attrs = (0..n).map(|_| MaterialAttributes::new(rng.random_range(0.5..2.0), 4)).collect();
        SceneTemplate::new(kernels, attrs, rng.random_range(0..n)).unwrap()
    }

    fn random_quat(rng: &mut impl Rng) -> [f64; 4] {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = quat_norm(&q);
        q.map(|v| v / n)
    }

    fn random_fields(rng: &mut impl Rng, h: &Hierarchy, normalized: bool) -> Vec<LevelDeformationField> {
        (1..=h.num_levels())
            .map(|l| LevelDeformationField {
                level: l,
                gradients: (0..h.level(l).len())
                    .map(|_| {
                        let g = PolarSvdGradient {
                            quat_u: random_quat(rng),
                            quat_v: random_quat(rng),
                            lambda: Vec3::from_fn(|_, _| rng.random_range(-0.3f64..0.3).exp()),
                        };
                        if normalized {
                            g.normalized().unwrap()
                        } else {
                            g
                        }
                    })
                    .collect(),
            })
            .collect()
    }

    /// Literal level-by-level recursion over every kernel and node.
    fn naive(h: &Hierarchy, fields: &[LevelDeformationField]) -> Vec<Vec3> {
        let levels = h.num_levels();
        let mut items: Vec<Vec<Vec3>> = h.template_positions();
        for l in (1..=levels).rev() {
            let fs: Vec<Mat3> = fields[l - 1].gradients.iter().map(compose).collect();
            let pivots: Vec<Vec3> = if l == levels {
                vec![h.root_position(); h.level(l).len()]
            } else {
                items[l].clone()
            };
            for j in 0..=l {
                let map: Vec<usize> = if j == l {
                    (0..h.level(l).len()).collect()
                } else {
                    (0..items[j].len())
                        .map(|i| {
                            let mut a = i;
                            for lv in j..l {
                                a = h.level(lv)[a].parent.unwrap();
                            }
                            a
                        })
                        .collect()
                };
                if j == l && l < levels {
                    continue;
                }
                items[j] = apply_level(&pivots, &items[j], &map, &fs).unwrap();
            }
        }
        items[0].clone()
    }

    #[test]
    fn apply_level_examples() {
        let out = apply_level(&[Vec3::zeros()], &[Vec3::new(1.0, 0.0, 0.0)], &[0], &[Mat3::from_diagonal(&Vec3::new(2.0, 1.0, 1.0))]).unwrap();
        assert_eq!(out[0], Vec3::new(2.0, 0.0, 0.0));
        let kids = [Vec3::new(0.3, 0.1, 0.0), Vec3::new(-1.0, 2.0, 0.5)];
        let out = apply_level(&[Vec3::new(0.1, 0.1, 0.1)], &kids, &[0, 0], &[Mat3::identity()]).unwrap();
        assert_eq!(out, kids.to_vec());
        assert!(apply_level(&[Vec3::zeros()], &kids, &[0, 1], &[Mat3::identity()]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = crate::deformation::quat_to_rotation(&random_quat(&mut rng)).unwrap();
        let parent = Vec3::new(0.2, -0.4, 1.0);
        for _ in 0..100 {
            let x = Vec3::from_fn(|_, _| rng.random_range(-2.0..2.0));
            let y = apply_level(&[parent], &[x], &[0], &[r]).unwrap()[0];
            assert!(((y - parent).norm() - (x - parent).norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scene = random_scene(&mut rng, 80);
        let h = build_hierarchy(&scene, &[0.15, 0.5]).unwrap();
        let r = propagate_recursive(&h, &identity_fields(&h), &scene).unwrap();
        assert_eq!(r.positions, scene.positions());
        for (c, k) in r.covariances.iter().zip(&scene.kernels) {
            assert_eq!(*c, k.covariance);
        }
        assert!(r.rotations.iter().all(|m| *m == Mat3::identity()));
    }

    #[test]
    fn single_level_matches_apply_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = random_scene(&mut rng, 60);
        let h = build_hierarchy(&scene, &[0.2]).unwrap();
        let fields = random_fields(&mut rng, &h, true);
        let r = propagate_recursive(&h, &fields, &scene).unwrap();
        let fs: Vec<Mat3> = fields[0].gradients.iter().map(compose).collect();
        let map: Vec<usize> = (0..60).map(|k| h.ancestor(1, k)).collect();
        let pivots = vec![scene.root_position(); fs.len()];
        let direct = apply_level(&pivots, &scene.positions(), &map, &fs).unwrap();
        for (a, b) in r.positions.iter().zip(&direct) {
            assert!((a - b).amax() < 1e-12);
        }
    }

    #[test]
    fn single_kernel_stretch() {
        // one kernel 1 unit from its CMS at the root: 2I moves it to distance 2
        let root = GaussianKernel::isotropic(Vec3::zeros(), 0.01);
        let k = GaussianKernel::isotropic(Vec3::new(1.0, 0.0, 0.0), 0.01);
        let scene = SceneTemplate::new(vec![root, k], vec![MaterialAttributes::new(1.0, 0); 2], 0).unwrap();
        let h = build_hierarchy(&scene, &[0.1]).unwrap();
        let mut fields = identity_fields(&h);
        fields[0].gradients[1] = PolarSvdGradient::stretch(Vec3::new(2.0, 2.0, 2.0));
        let r = propagate_recursive(&h, &fields, &scene).unwrap();
        assert_eq!(r.positions[1], Vec3::new(2.0, 0.0, 0.0));
        assert_eq!(r.positions[0], Vec3::zeros());
    }

    #[test]
    fn recursive_matches_expanded_and_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let n = rng.random_range(2..=100);
            let scene = random_scene(&mut rng, n);
            let h = build_hierarchy(&scene, &[0.2, 0.6]).unwrap();
            let fields = random_fields(&mut rng, &h, true);
            let r = propagate_recursive(&h, &fields, &scene).unwrap();
            let nv = naive(&h, &fields);
            for k in 0..n {
                let e = expanded_position(&h, &fields, &scene, k).unwrap();
                worst = worst.max((e - r.positions[k]).amax());
                worst = worst.max((nv[k] - r.positions[k]).amax());
            }
        }
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn naive_matches_for_three_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scene = random_scene(&mut rng, 90);
        let h = build_hierarchy(&scene, &[0.12, 0.3, 0.7]).unwrap();
        let fields = random_fields(&mut rng, &h, false);
        let r = propagate_recursive(&h, &fields, &scene).unwrap();
        for (a, b) in r.positions.iter().zip(naive(&h, &fields)) {
            assert!((a - b).amax() < 1e-12);
        }
        assert!(expanded_position(&h, &fields, &scene, 0).is_err());
    }

    #[test]
    fn covariance_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let sigma = a * a.transpose() + Mat3::identity() * 0.1;
        assert_eq!(propagate_covariance(&[], &sigma).unwrap(), sigma);
        let out = propagate_covariance(&[Mat3::identity() * 2.0, Mat3::identity()], &sigma).unwrap();
        assert!((out - sigma * 4.0).amax() < 1e-14);
        assert!(propagate_covariance(&[Mat3::zeros()], &sigma).is_err());

        let scene = random_scene(&mut rng, 70);
        let h = build_hierarchy(&scene, &[0.2, 0.6]).unwrap();
        let fields = random_fields(&mut rng, &h, false);
        let r = propagate_recursive(&h, &fields, &scene).unwrap();
        for k in 0..70 {
            let chain = inherited_gradients(&h, &fields, k);
            // stepwise from the top level down
            let mut s = scene.kernels[k].covariance;
            for f in chain.iter().rev() {
                s = transform_covariance(f, &s).unwrap();
            }
            let scale = s.amax();
            assert!((r.covariances[k] - s).amax() <= 1e-12 * scale);
            assert!((propagate_covariance(&chain, &scene.kernels[k].covariance).unwrap() - s).amax() <= 1e-12 * scale);
        }
    }

    #[test]
    fn color_direction() {
        let d = Vec3::new(1.0, 0.0, 0.0);
        assert_eq!(propagate_color_direction(&[], &d), d);
        let rz = crate::deformation::quat_to_rotation(&[0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(propagate_color_direction(&[rz], &d), Vec3::new(-1.0, 0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let chain: Vec<Mat3> = (0..3)
                .map(|_| crate::deformation::quat_to_rotation(&random_quat(&mut rng)).unwrap())
                .collect();
            let dir = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
            assert!((propagate_color_direction(&chain, &dir).norm() - 1.0).abs() < 1e-12);
        }
        // the result's accumulated rotations agree with the chain form
        let scene = random_scene(&mut rng, 50);
        let h = build_hierarchy(&scene, &[0.2, 0.6]).unwrap();
        let fields = random_fields(&mut rng, &h, true);
        let r = propagate_recursive(&h, &fields, &scene).unwrap();
        for k in 0..50 {
            let chain: Vec<Mat3> = (1..=2)
                .map(|l| deformation_rotation(&fields[l - 1].gradients[h.ancestor(l, k)]))
                .collect();
            let dir = Vec3::new(0.0, 0.6, 0.8);
            let a = propagate_color_direction(&chain, &dir);
            assert!((r.rotations[k].transpose() * dir - a).amax() < 1e-12);
        }
    }

    #[test]
    fn volume_conserved_end_to_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scene = random_scene(&mut rng, 100);
        let h = build_hierarchy(&scene, &[0.15, 0.5]).unwrap();
        let fields = random_fields(&mut rng, &h, true);
        let r = propagate_recursive(&h, &fields, &scene).unwrap();
        let v0: f64 = scene.kernels.iter().map(|k| kernel_volume(k).unwrap()).sum();
        let v1: f64 = r.covariances.iter().map(|c| crate::splat::covariance_volume(c).unwrap()).sum();
        assert!((v1 - v0).abs() <= 1e-9 * v0);
    }

    #[test]
    fn rigid_chain_preserves_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scene = random_scene(&mut rng, 60);
        let q = axis_angle_quat(&Vec3::new(0.3, 1.0, -0.2), 0.7);
        let rot = PolarSvdGradient { quat_u: q, quat_v: IDENTITY_QUAT, lambda: Vec3::new(1.0, 1.0, 1.0) };
        let check = |h: &Hierarchy, fields: &[LevelDeformationField]| {
            let r = propagate_recursive(h, fields, &scene).unwrap();
            for i in 0..60 {
                for j in 0..60 {
                    let d0 = (scene.kernels[i].position - scene.kernels[j].position).norm();
                    let d1 = (r.positions[i] - r.positions[j]).norm();
                    assert!((d0 - d1).abs() < 1e-12);
                }
            }
        };
        let h1 = build_hierarchy(&scene, &[0.2]).unwrap();
        let mut f1 = identity_fields(&h1);
        f1[0].gradients.iter_mut().for_each(|g| *g = rot);
        check(&h1, &f1);
        let h2 = build_hierarchy(&scene, &[0.2, 0.6]).unwrap();
        let mut f2 = identity_fields(&h2);
        f2[1].gradients.iter_mut().for_each(|g| *g = rot);
        check(&h2, &f2);
    }

    #[test]
    fn root_stays_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let scene = random_scene(&mut rng, 40);
            let h = build_hierarchy(&scene, &[0.2, 0.6]).unwrap();
            let fields = random_fields(&mut rng, &h, false);
            let r = propagate_recursive(&h, &fields, &scene).unwrap();
            assert_eq!(r.positions[scene.root_kernel_id], scene.root_position());
        }
    }

    #[test]
    fn field_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scene = random_scene(&mut rng, 30);
        let h = build_hierarchy(&scene, &[0.2, 0.6]).unwrap();
        let mut fields = identity_fields(&h);
        fields.pop();
        assert!(propagate_recursive(&h, &fields, &scene).is_err());
        let mut fields = identity_fields(&h);
        fields[0].gradients.pop();
        assert!(propagate_recursive(&h, &fields, &scene).is_err());
        let mut fields = identity_fields(&h);
        fields[1].gradients[0].lambda.x = -1.0;
        assert!(matches!(
            propagate_recursive(&h, &fields, &scene),
            Err(Error::ProviderOutput { level: 2, node: 0, .. })
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let scene = random_scene(&mut rng, 50);
        let h = build_hierarchy(&scene, &[0.15, 0.4, 0.8]).unwrap();
        let fields = random_fields(&mut rng, &h, false);
        let fs = composed_gradients(&fields);
        let wk: Vec<Vec3> = (0..50).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let wn: Vec<Vec<Vec3>> = (0..=3)
            .map(|l| {
                if l == 0 {
                    Vec::new()
                } else {
                    (0..h.level(l).len()).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect()
                }
            })
            .collect();
        let loss = |fs: &[Vec<Mat3>]| {
            let t = node_transforms(&h, fs);
            let xs = kernel_positions(&h, &t);
            let mut s: f64 = xs.iter().zip(&wk).map(|(x, w)| x.dot(w)).sum();
            for l in 1..=3 {
                s += t.positions[l].iter().zip(&wn[l]).map(|(x, w)| x.dot(w)).sum::<f64>();
            }
            s
        };
        let t = node_transforms(&h, &fs);
        let df = propagate_backward(&h, &fs, &t, &wk, Some(&wn));
        let eps = 1e-6;
        for l in 0..3 {
            for n in 0..fs[l].len().min(4) {
                for e in 0..9 {
                    let mut plus = fs.to_vec();
                    plus[l][n][e] += eps;
                    let mut minus = fs.to_vec();
                    minus[l][n][e] -= eps;
                    let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                    assert!((fd - df[l][n][e]).abs() < 1e-6 * fd.abs().max(1.0), "{l} {n} {e}: {fd} vs {}", df[l][n][e]);
                }
            }
        }
    }
}
