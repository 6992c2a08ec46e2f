//! Hierarchical vs flat (one gradient per kernel) prediction cost.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::engine::{bootstrap, step};
use crate::hierarchy::{build_hierarchy, prediction_count, Hierarchy, HierarchyStats};
use crate::providers::{GradientProvider, LearnedProvider, ModelConfig, PredictorModel};
use crate::splat::SceneTemplate;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathTiming {
    pub predictions: usize,
    /// Mean wall time of one `step` call.
    pub step_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub level_counts: Vec<usize>,
    pub stats: HierarchyStats,
    pub hierarchical: PathTiming,
    pub flat: PathTiming,
}

impl BenchReport {
    /// `1 − N_F / N_flat`.
    pub fn prediction_reduction(&self) -> f64 {
        1.0 - self.hierarchical.predictions as f64 / self.flat.predictions as f64
    }

    pub fn speedup(&self) -> f64 {
        self.flat.step_seconds / self.hierarchical.step_seconds
    }
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "level counts     {:?}", self.level_counts)?;
        writeln!(f, "N_K              {}", self.stats.n_kernels)?;
        writeln!(f, "N_F              {}", self.stats.predictions)?;
        writeln!(f, "N_F/N_K          {:.4}", self.stats.ratio)?;
        writeln!(f, "path          predictions   step_ms")?;
        writeln!(f, "hierarchical  {:>11}   {:>7.2}", self.hierarchical.predictions, self.hierarchical.step_seconds * 1e3)?;
        writeln!(f, "flat          {:>11}   {:>7.2}", self.flat.predictions, self.flat.step_seconds * 1e3)?;
        write!(
            f,
            "reduction {:.1}% of predictions, step speedup {:.2}x",
            100.0 * self.prediction_reduction(),
            self.speedup()
        )
    }
}

/// Formats the statistics table for known level counts (no timing).
pub fn stats_table(counts: &[usize]) -> Result<String> {
    let s = HierarchyStats::from_level_counts(counts)?;
    Ok(format!(
        "level counts     {counts:?}\nN_K              {}\nN_F              {}\nN_F/N_K          {:.4}",
        s.n_kernels, s.predictions, s.ratio
    ))
}

fn time_steps(scene: &SceneTemplate, h: &Hierarchy, provider: &dyn GradientProvider, dt: f64, steps: usize) -> Result<f64> {
    let mut state = bootstrap(scene, h, dt, None)?;
    // warm-up step, not timed
    state = step(&state, h, provider, scene)?;
    let start = Instant::now();
    for _ in 0..steps {
        state = step(&state, h, provider, scene)?;
    }
    Ok(start.elapsed().as_secs_f64() / steps.max(1) as f64)
}

/// Times `steps` steps of the learned provider on the hierarchy built with
/// `radii` and on a flat hierarchy with neighborhood radius `flat_radius`.
pub fn run_bench(
    scene: &SceneTemplate,
    radii: &[f64],
    flat_radius: f64,
    model: &ModelConfig,
    dt: f64,
    steps: usize,
) -> Result<BenchReport> {
    let h = build_hierarchy(scene, radii)?;
    let stats = prediction_count(&h)?;
    let flat = Hierarchy::flat(scene, flat_radius)?;
    let make = |levels: usize| -> Result<LearnedProvider> {
        let cfg = ModelConfig {
            num_levels: levels,
            attribute_dim: scene.attribute_dim(),
            ..model.clone()
        };
        Ok(LearnedProvider::new(PredictorModel::new(cfg)?))
    };
    let hier_provider = make(h.num_levels())?;
    let flat_provider = make(1)?;
    let hier_time = time_steps(scene, &h, &hier_provider, dt, steps)?;
    let flat_time = time_steps(scene, &flat, &flat_provider, dt, steps)?;
    Ok(BenchReport {
        level_counts: h.level_counts(),
        stats,
        hierarchical: PathTiming {
            predictions: stats.predictions,
            step_seconds: hier_time,
        },
        flat: PathTiming {
            predictions: prediction_count(&flat)?.predictions,
            step_seconds: flat_time,
        },
    })
}
