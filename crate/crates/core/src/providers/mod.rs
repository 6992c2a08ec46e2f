//! Deformation-gradient providers: anything that maps the two latest states
//! (plus one earlier slice for accelerations) to one gradient per CMS.

pub mod autodiff;
pub mod features;
pub mod model;
mod oscillator;
pub mod train;

use crate::deformation::{unit_quat_matrix, PolarSvdGradient, Quat};
use crate::hierarchy::Hierarchy;
use crate::propagation::{identity_fields, LevelDeformationField};
use crate::{Error, Mat3, Result, Vec3};

pub use model::{LearnedProvider, ModelConfig, PredictorModel};
pub use oscillator::{OscillatorParams, OscillatorProvider};
pub use train::{train, EpochStats, TrainingConfig};

/// Everything a provider may look at for one step `t → t + 1`.
///
/// The slices hold node positions for levels `0..=L` (level 0 = kernels) at
/// `t`, `t − 1` and `t − 2`.
#[derive(Clone, Copy)]
pub struct ProviderInput<'a> {
    pub hierarchy: &'a Hierarchy,
    pub step: u64,
    pub dt: f64,
    pub current: &'a [Vec<Vec3>],
    pub previous: &'a [Vec<Vec3>],
    pub earlier: &'a [Vec<Vec3>],
}

impl<'a> ProviderInput<'a> {
    pub fn new(
        hierarchy: &'a Hierarchy,
        step: u64,
        dt: f64,
        current: &'a [Vec<Vec3>],
        previous: &'a [Vec<Vec3>],
        earlier: &'a [Vec<Vec3>],
    ) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        let counts = hierarchy.level_counts();
        for (name, slice) in [("current", current), ("previous", previous), ("earlier", earlier)] {
            if slice.len() != counts.len() || slice.iter().zip(&counts).any(|(s, c)| s.len() != *c) {
                return Err(Error::shape(format!("{name} history does not match hierarchy levels")));
            }
        }
        Ok(Self {
            hierarchy,
            step,
            dt,
            current,
            previous,
            earlier,
        })
    }
}

/// The predictor contract ψ. Implementations must be pure functions of the
/// input so that stepping is deterministic.
pub trait GradientProvider: Send + Sync {
    fn name(&self) -> &str;

    /// One field per level `1..=L`.
    fn predict(&self, input: &ProviderInput) -> Result<Vec<LevelDeformationField>>;
}

/// Predicts `F = I` everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityProvider;

impl GradientProvider for IdentityProvider {
    fn name(&self) -> &str {
        "identity"
    }

    fn predict(&self, input: &ProviderInput) -> Result<Vec<LevelDeformationField>> {
        Ok(identity_fields(input.hierarchy))
    }
}

/// Width of the raw per-node output: two quaternions and three log stretches.
pub const OUTPUT_DIM: usize = 11;

fn biased_quat(raw: &[f64]) -> (Quat, f64) {
    let u = [raw[0] + 1.0, raw[1], raw[2], raw[3]];
    let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    (u.map(|v| v / n), n)
}

fn stretch_from_logits(raw: &[f64]) -> Vec3 {
    // exp followed by unit-product normalization, done in log space
    let mean = (raw[0] + raw[1] + raw[2]) / 3.0;
    Vec3::new((raw[0] - mean).exp(), (raw[1] - mean).exp(), (raw[2] - mean).exp())
}

/// Maps a raw 11-vector to a gradient: `U` from `raw[0..4] + (1,0,0,0)`,
/// `V` from `raw[4..8] + (1,0,0,0)` (both normalized), `λ` from
/// `exp(raw[8..11])` normalized to unit product. A zero vector maps to `F = I`.
pub fn gradient_from_raw(raw: &[f64], level: usize, node: usize) -> Result<PolarSvdGradient> {
    let bad = |reason: &str| Error::ProviderOutput {
        level,
        node,
        reason: reason.to_string(),
    };
    if raw.len() != OUTPUT_DIM {
        return Err(bad("output width is not 11"));
    }
    if raw.iter().any(|v| v.is_nan()) {
        return Err(bad("NaN in network output"));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite network output"));
    }
    let (quat_u, nu) = biased_quat(&raw[0..4]);
    let (quat_v, nv) = biased_quat(&raw[4..8]);
    if !(nu > 0.0) || !(nv > 0.0) {
        return Err(bad("degenerate quaternion"));
    }
    let lambda = stretch_from_logits(&raw[8..11]);
    if !lambda.iter().all(|l| l.is_finite() && *l > 0.0) {
        return Err(bad("singular values out of range"));
    }
    Ok(PolarSvdGradient { quat_u, quat_v, lambda })
}

/// `∂R/∂q_c` of the unit-quaternion rotation formula at `q`.
fn rotation_partials(q: &Quat) -> [Mat3; 4] {
    let [w, x, y, z] = *q;
    [
        Mat3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Mat3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Mat3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Mat3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

fn quat_backward(raw: &[f64], d_rot: &Mat3, out: &mut [f64]) {
    let (q, n) = biased_quat(raw);
    let partials = rotation_partials(&q);
    let dq: [f64; 4] = std::array::from_fn(|c| partials[c].component_mul(d_rot).sum());
    let dot: f64 = q.iter().zip(&dq).map(|(a, b)| a * b).sum();
    for c in 0..4 {
        out[c] += (dq[c] - q[c] * dot) / n;
    }
}

/// Chain rule from `dL/dF` back to the raw 11-vector.
pub fn raw_backward(raw: &[f64], d_f: &Mat3) -> [f64; OUTPUT_DIM] {
    let (qu, _) = biased_quat(&raw[0..4]);
    let (qv, _) = biased_quat(&raw[4..8]);
    let u = unit_quat_matrix(&qu);
    let v = unit_quat_matrix(&qv);
    let lambda = stretch_from_logits(&raw[8..11]);
    let l = Mat3::from_diagonal(&lambda);

    let mut out = [0.0; OUTPUT_DIM];
    quat_backward(&raw[0..4], &(d_f * v * l), &mut out[0..4]);
    quat_backward(&raw[4..8], &(d_f.transpose() * u * l), &mut out[4..8]);
    let inner = u.transpose() * d_f * v;
    let weighted: Vec<f64> = (0..3).map(|i| lambda[i] * inner[(i, i)]).collect();
    let mean: f64 = weighted.iter().sum::<f64>() / 3.0;
    for i in 0..3 {
        out[8 + i] = weighted[i] - mean;
    }
    out
}

/// Maps a whole row-major `(nodes × 11)` output to fields; `offsets[l - 1]`
/// is the first row of level `l`.
pub fn fields_from_raw(h: &Hierarchy, raw: &[f64], offsets: &[usize]) -> Result<Vec<LevelDeformationField>> {
    (1..=h.num_levels())
        .map(|l| {
            let start = offsets[l - 1];
            let gradients = (0..h.level(l).len())
                .map(|n| {
                    let row = (start + n) * OUTPUT_DIM;
                    gradient_from_raw(&raw[row..row + OUTPUT_DIM], l, n)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(LevelDeformationField { level: l, gradients })
        })
        .collect()
}
