//! Trainer for the learned predictor on kernel-position supervision.
//!
//! Each sample starts from a ground-truth history at frame `s` and rolls the
//! model out for `T` steps. Every step is a separate forward/backward pass;
//! the predicted state fed to the next step is treated as a constant. With
//! probability `1/T` the sample also carries the static loss, the residual of
//! predicting from a motionless template.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::autodiff::Tensor;
use super::features::build_graph;
use super::model::{model_gradient, OutputLoss, PredictorModel};
use super::{gradient_from_raw, raw_backward, ProviderInput, OUTPUT_DIM};
use crate::constraints::momentum_loss_grad;
use crate::deformation::compose;
use crate::engine::Trajectory;
use crate::hierarchy::Hierarchy;
use crate::propagation::{kernel_positions, node_transforms, propagate_backward};
use crate::{Error, Mat3, Result, Vec3};

/// Longest curriculum rollout.
pub const MAX_ROLLOUT: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// The learning rate halves after every epoch past this one.
    pub decay_after: usize,
    pub samples_per_epoch: usize,
    /// Samples averaged into one parameter update.
    pub batch_size: usize,
    /// Curriculum `T = min(epoch + 1, max_rollout)`.
    pub max_rollout: usize,
    /// Overrides the curriculum with a constant `T`.
    pub fixed_rollout: Option<usize>,
    pub static_weight: f64,
    pub momentum_weight: f64,
    /// Half-width (radians) of random rotations about every CMS node applied
    /// to each sample's starting history, so the model also learns to
    /// correct its own rollout errors.
    pub input_noise: f64,
    /// Only frames `< train_frames` are used (all when `None`).
    pub train_frames: Option<usize>,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            learning_rate: 3e-3,
            decay_after: 16,
            samples_per_epoch: 150,
            batch_size: 4,
            max_rollout: MAX_ROLLOUT,
            fixed_rollout: None,
            static_weight: 1.0,
            momentum_weight: 1.0,
            input_noise: 5e-3,
            train_frames: None,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl TrainingConfig {
    pub fn full_scale() -> Self {
        Self {
            learning_rate: 8e-4,
            ..Self::default()
        }
    }

    pub fn rollout_for_epoch(&self, epoch: usize) -> usize {
        self.fixed_rollout
            .unwrap_or_else(|| (epoch + 1).min(self.max_rollout.min(MAX_ROLLOUT)))
            .max(1)
    }

    /// Probability of adding the static loss to a sample.
    pub fn static_probability(&self, rollout: usize) -> f64 {
        1.0 / rollout as f64
    }

    pub fn learning_rate_for_epoch(&self, epoch: usize) -> f64 {
        let halvings = epoch.saturating_sub(self.decay_after) as i32;
        self.learning_rate * 0.5f64.powi(halvings)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.max_rollout == 0 || self.fixed_rollout == Some(0) {
            return Err(Error::config("rollout length must be at least 1"));
        }
        if !(self.input_noise >= 0.0) {
            return Err(Error::config("input_noise must be non-negative"));
        }
        if self.samples_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::config("samples_per_epoch and batch_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub rollout: usize,
    pub learning_rate: f64,
    /// Mean per-step position loss (mean squared kernel error).
    pub loss: f64,
    /// Mean static loss over the samples that carried it (0 if none did).
    pub static_loss: f64,
    pub static_samples: usize,
    pub momentum_loss: f64,
}

/// Mean squared kernel position error against `target` plus weighted momentum
/// loss, differentiated through the output mapping and the propagation.
pub struct PositionLoss<'a> {
    pub hierarchy: &'a Hierarchy,
    pub offsets: &'a [usize],
    pub target: &'a [Vec3],
    /// `mean` divides the squared error by the kernel count; otherwise it is summed.
    pub mean: bool,
    pub momentum_weight: f64,
    /// Predicted node positions for levels `0..=L` from the last `eval`.
    pub predicted: RefCell<Vec<Vec<Vec3>>>,
    pub momentum: RefCell<f64>,
}

impl<'a> PositionLoss<'a> {
    pub fn new(hierarchy: &'a Hierarchy, offsets: &'a [usize], target: &'a [Vec3], mean: bool, momentum_weight: f64) -> Self {
        Self {
            hierarchy,
            offsets,
            target,
            mean,
            momentum_weight,
            predicted: RefCell::new(Vec::new()),
            momentum: RefCell::new(0.0),
        }
    }
}

impl OutputLoss for PositionLoss<'_> {
    fn eval(&self, raw: &Tensor) -> Result<(f64, Tensor)> {
        let h = self.hierarchy;
        let levels = h.num_levels();
        let mut fs: Vec<Vec<Mat3>> = Vec::with_capacity(levels);
        for l in 1..=levels {
            let start = self.offsets[l - 1];
            let row = (0..h.level(l).len())
                .map(|n| gradient_from_raw(raw.row(start + n), l, n).map(|g| compose(&g)))
                .collect::<Result<Vec<_>>>()?;
            fs.push(row);
        }
        let t = node_transforms(h, &fs);
        let xs = kernel_positions(h, &t);
        let scale = if self.mean { 1.0 / xs.len() as f64 } else { 1.0 };
        let mut value = 0.0;
        let mut kernel_grads: Vec<Vec3> = xs
            .iter()
            .zip(self.target)
            .map(|(x, y)| {
                let d = x - y;
                value += d.norm_squared() * scale;
                d * (2.0 * scale)
            })
            .collect();

        let mut level_positions = t.positions.clone();
        level_positions[0] = xs;
        let mut node_grads: Vec<Vec<Vec3>> = vec![Vec::new(); levels + 1];
        if self.momentum_weight > 0.0 && levels >= 2 {
            let (m, g) = momentum_loss_grad(h, &level_positions)?;
            value += self.momentum_weight * m;
            *self.momentum.borrow_mut() = m;
            for (k, d) in g[0].iter().enumerate() {
                kernel_grads[k] += d * self.momentum_weight;
            }
            for l in 1..g.len().min(levels + 1) {
                node_grads[l] = g[l].iter().map(|d| d * self.momentum_weight).collect();
            }
        }
        let df = propagate_backward(h, &fs, &t, &kernel_grads, Some(&node_grads));

        let mut grad = Tensor::zeros(raw.rows, OUTPUT_DIM);
        for l in 1..=levels {
            let start = self.offsets[l - 1];
            for (n, d) in df[l - 1].iter().enumerate() {
                let row = start + n;
                let g = raw_backward(raw.row(row), d);
                grad.data[row * OUTPUT_DIM..(row + 1) * OUTPUT_DIM].copy_from_slice(&g);
            }
        }
        *self.predicted.borrow_mut() = level_positions;
        Ok((value, grad))
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, b1: f64, b2: f64) {
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-12);
        }
    }
}

fn add_into(acc: &mut [f64], grads: &[Tensor]) {
    let mut at = 0;
    for t in grads {
        for v in &t.data {
            acc[at] += v;
            at += 1;
        }
    }
}

/// Ground-truth node positions (levels `0..=L`) of every frame.
fn level_histories(h: &Hierarchy, traj: &Trajectory) -> Vec<Vec<Vec<Vec3>>> {
    traj.frames.iter().map(|f| h.barycenters(&f.positions)).collect()
}

/// Kernel positions perturbed by a small random rotation for every CMS node,
/// applied to all of its descendants, then re-aggregated.
fn noisy_levels(h: &Hierarchy, levels: &[Vec<Vec3>], noise: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec3>> {
    if noise <= 0.0 {
        return levels.to_vec();
    }
    let top = h.num_levels();
    let xr = h.root_position();
    let mut kernels = levels[0].clone();
    for l in 1..=top {
        let spins: Vec<Vec3> = (0..h.level(l).len())
            .map(|_| Vec3::from_fn(|_, _| rng.random_range(-noise..noise)))
            .collect();
        for (k, x) in kernels.iter_mut().enumerate() {
            let n = h.ancestor(l, k);
            // top-level gradients act about the root, lower ones about the node
            let pivot = if l == top { xr } else { levels[l][n] };
            *x += spins[n].cross(&(levels[0][k] - pivot));
        }
    }
    h.barycenters(&kernels)
}

/// Feature graphs of ground-truth histories, for the input normalizers.
fn normalizer_graphs(
    model: &PredictorModel,
    h: &Hierarchy,
    data: &[(Vec<Vec<Vec<Vec3>>>, f64)],
    limit: usize,
) -> Result<Vec<super::features::GraphFeatures>> {
    let mut graphs = Vec::new();
    for (frames, dt) in data {
        let last = frames.len().min(limit);
        for s in (2..last).step_by(3) {
            let input = ProviderInput::new(h, s as u64, *dt, &frames[s], &frames[s - 1], &frames[s - 2])?;
            graphs.push(build_graph(&input, &model.config.edges)?);
        }
    }
    Ok(graphs)
}

/// Trains `model` in place and returns the per-epoch loss curve.
pub fn train(
    model: &mut PredictorModel,
    trajectories: &[Trajectory],
    h: &Hierarchy,
    config: &TrainingConfig,
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    if trajectories.is_empty() {
        return Err(Error::invalid("no training trajectories"));
    }
    let limit = config.train_frames.unwrap_or(usize::MAX);
    let data: Vec<(Vec<Vec<Vec<Vec3>>>, f64)> = trajectories
        .iter()
        .map(|t| {
            if t.frames.iter().any(|f| f.positions.len() != h.kernel_count()) {
                return Err(Error::shape("trajectory does not match the hierarchy"));
            }
            let mut frames = level_histories(h, t);
            frames.truncate(limit);
            Ok((frames, t.dt))
        })
        .collect::<Result<_>>()?;
    let usable: Vec<usize> = (0..data.len()).filter(|&i| data[i].0.len() >= 4).collect();
    if usable.is_empty() {
        return Err(Error::invalid("training trajectories need at least 4 frames"));
    }

    let graphs = normalizer_graphs(model, h, &data, limit)?;
    model.fit_normalizers(&graphs);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = model.flat_params();
    let mut adam = Adam::new(params.len());
    let template = h.template_positions();
    let mut curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let rollout = config.rollout_for_epoch(epoch);
        let lr = config.learning_rate_for_epoch(epoch);
        let mut stats = EpochStats {
            epoch,
            rollout,
            learning_rate: lr,
            loss: 0.0,
            static_loss: 0.0,
            static_samples: 0,
            momentum_loss: 0.0,
        };
        let mut steps = 0usize;
        let mut grad = vec![0.0; params.len()];
        for sample in 0..config.samples_per_epoch {
            let (frames, dt) = &data[usable[rng.random_range(0..usable.len())]];
            // the window must hold s-2 ..= s+T
            let t_len = rollout.min(frames.len() - 3);
            let s = rng.random_range(2..frames.len() - t_len);

            if rng.random_bool(config.static_probability(rollout)) {
                let input = ProviderInput::new(h, 0, *dt, &template, &template, &template)?;
                let g = build_graph(&input, &model.config.edges)?;
                let loss = PositionLoss::new(h, &g.offsets, &template[0], false, 0.0);
                let (v, pg) = model_gradient(model, &g, &loss)?;
                let scaled: Vec<Tensor> = pg
                    .into_iter()
                    .map(|mut t| {
                        t.data.iter_mut().for_each(|x| *x *= config.static_weight);
                        t
                    })
                    .collect();
                add_into(&mut grad, &scaled);
                stats.static_loss += v;
                stats.static_samples += 1;
            }

            let [mut early, mut prev, mut cur] =
                [s - 2, s - 1, s].map(|i| noisy_levels(h, &frames[i], config.input_noise, &mut rng));
            for i in 0..t_len {
                let step = s + i;
                let input = ProviderInput::new(h, step as u64, *dt, &cur, &prev, &early)?;
                let g = build_graph(&input, &model.config.edges)?;
                let loss = PositionLoss::new(h, &g.offsets, &frames[step + 1][0], true, config.momentum_weight);
                let (v, pg) = model_gradient(model, &g, &loss)?;
                add_into(&mut grad, &pg);
                stats.loss += v - config.momentum_weight * *loss.momentum.borrow();
                stats.momentum_loss += *loss.momentum.borrow();
                steps += 1;
                let next = loss.predicted.into_inner();
                early = std::mem::replace(&mut prev, std::mem::replace(&mut cur, next));
            }
            let in_batch = sample % config.batch_size + 1;
            if in_batch < config.batch_size && sample + 1 < config.samples_per_epoch {
                continue;
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("parameter gradient in epoch {epoch}")));
            }
            grad.iter_mut().for_each(|g| *g /= in_batch as f64);
            adam.step(&mut params, &grad, lr, config.beta1, config.beta2);
            model.set_flat_params(&params)?;
            grad.iter_mut().for_each(|g| *g = 0.0);
        }
        stats.loss /= steps.max(1) as f64;
        stats.momentum_loss /= steps.max(1) as f64;
        if stats.static_samples > 0 {
            stats.static_loss /= stats.static_samples as f64;
        }
        log::info!(
            "epoch {epoch}: T={rollout} lr={lr:.2e} loss={:.4e} static={:.3e}",
            stats.loss,
            stats.static_loss
        );
        curve.push(stats);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curriculum_schedule() {
        let c = TrainingConfig::default();
        let ts: Vec<usize> = (0..20).map(|e| c.rollout_for_epoch(e)).collect();
        assert_eq!(&ts[..4], &[1, 2, 3, 4]);
        assert!(ts[15..].iter().all(|&t| t == 16));
        assert_eq!(c.static_probability(1), 1.0);
        assert_eq!(c.static_probability(16), 1.0 / 16.0);
        let fixed = TrainingConfig { fixed_rollout: Some(1), ..c.clone() };
        assert!((0..30).all(|e| fixed.rollout_for_epoch(e) == 1 && fixed.static_probability(1) == 1.0));
        let long = TrainingConfig { max_rollout: 40, ..c };
        assert_eq!(long.rollout_for_epoch(30), 16);
    }

    #[test]
    fn rotation_noise_stays_small_and_consistent() {
        use crate::hierarchy::build_hierarchy;
        use crate::synth::{generate_synthetic_scene, SceneShape, SynthSpec};
        let scene = generate_synthetic_scene(&SynthSpec { shape: SceneShape::Beam, count: 300, spacing: 0.02, seed: 0 }).unwrap();
        let h = build_hierarchy(&scene, &[0.04, 0.5]).unwrap();
        let levels = h.template_positions();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(noisy_levels(&h, &levels, 0.0, &mut rng), levels);
        let noisy = noisy_levels(&h, &levels, 1e-3, &mut rng);
        // each level rotates by at most √3·1e-3 rad over a lever of at most the diagonal
        let bound = h.num_levels() as f64 * 3f64.sqrt() * 1e-3 * scene.bounding_diagonal();
        let moved = noisy[0].iter().zip(&levels[0]).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(moved > 0.0 && moved <= bound, "{moved} vs {bound}");
        assert_eq!(noisy, h.barycenters(&noisy[0]));
    }

    #[test]
    fn learning_rate_decay() {
        let c = TrainingConfig::default();
        assert_eq!(c.learning_rate_for_epoch(0), c.learning_rate);
        assert_eq!(c.learning_rate_for_epoch(16), c.learning_rate);
        assert_eq!(c.learning_rate_for_epoch(18), c.learning_rate / 4.0);
    }
}
