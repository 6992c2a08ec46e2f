//! Message-passing predictor of per-node deformation gradients.
//!
//! Encoders gate the dynamic features by the static context,
//! `h = tanh(x_dyn·W) ⊙ (1 + x_ctx·W)`, and the processor and decoder carry no
//! hidden biases. A static history therefore produces exactly the decoder's
//! output bias, which training drives to zero (`F = I`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::autodiff::{Tape, Tensor, Var};
use super::features::{build_graph, EdgeConfig, GraphFeatures, EDGE_CTX_DIM, EDGE_DYN_DIM, NODE_DYN_DIM};
use super::{fields_from_raw, GradientProvider, ProviderInput, OUTPUT_DIM};
use crate::propagation::LevelDeformationField;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Message-passing rounds.
    pub rounds: usize,
    pub attribute_dim: usize,
    pub num_levels: usize,
    /// Uniform init half-width of the output layer.
    pub output_init: f64,
    pub seed: u64,
    pub edges: EdgeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            rounds: 2,
            attribute_dim: 4,
            num_levels: 2,
            output_init: 1e-3,
            seed: 0,
            edges: EdgeConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Full-size preset: 16 rounds of width 128.
    pub fn full_scale(attribute_dim: usize, num_levels: usize) -> Self {
        Self {
            hidden: 128,
            rounds: 16,
            attribute_dim,
            num_levels,
            ..Self::default()
        }
    }

    pub fn node_ctx_dim(&self) -> usize {
        self.attribute_dim + self.num_levels
    }

    /// `(name, rows, cols)` of every parameter, in storage order.
    pub fn layer_shapes(&self) -> Vec<(String, usize, usize)> {
        let h = self.hidden;
        let mut v = vec![
            ("node_dyn".to_string(), NODE_DYN_DIM, h),
            ("node_ctx".to_string(), self.node_ctx_dim(), h),
            ("edge_dyn".to_string(), EDGE_DYN_DIM, h),
            ("edge_ctx".to_string(), EDGE_CTX_DIM, h),
        ];
        for r in 0..self.rounds {
            v.push((format!("edge_update_{r}"), 3 * h, h));
            v.push((format!("node_update_{r}"), 2 * h, h));
        }
        v.push(("decoder_0".to_string(), h, h));
        v.push(("decoder_1".to_string(), h, h));
        v.push(("decoder_out".to_string(), h, OUTPUT_DIM));
        v.push(("decoder_bias".to_string(), 1, OUTPUT_DIM));
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(_, r, c)| r * c).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    pub config: ModelConfig,
    pub params: Vec<Tensor>,
    /// Per-channel multipliers applied to the dynamic features.
    pub node_scale: Vec<f64>,
    pub edge_scale: Vec<f64>,
}

/// A differentiable loss on the raw `(nodes × 11)` network output.
pub trait OutputLoss {
    /// Loss value and `dL/d raw`.
    fn eval(&self, raw: &Tensor) -> Result<(f64, Tensor)>;
}

impl PredictorModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.hidden == 0 {
            return Err(Error::config("hidden width must be positive"));
        }
        if config.num_levels == 0 {
            return Err(Error::config("the predictor needs at least one CMS level"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let shapes = config.layer_shapes();
        let last = shapes.len() - 2;
        let params = shapes
            .iter()
            .enumerate()
            .map(|(i, (_, r, c))| {
                let limit = if i >= last {
                    config.output_init
                } else {
                    (6.0 / (r + c) as f64).sqrt()
                };
                Tensor::new(*r, *c, (0..r * c).map(|_| rng.random_range(-limit..=limit)).collect())
            })
            .collect();
        Ok(Self {
            config,
            params,
            node_scale: vec![1.0; NODE_DYN_DIM],
            edge_scale: vec![1.0; EDGE_DYN_DIM],
        })
    }

    /// All-zero weights: predicts `F = I` for every input.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.params.iter_mut().for_each(|p| p.data.iter_mut().for_each(|v| *v = 0.0));
        Ok(m)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                flat.len()
            )));
        }
        let mut at = 0;
        for p in self.params.iter_mut() {
            let n = p.data.len();
            p.data.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Root-mean-square scaling of the dynamic features seen in `graphs`.
    pub fn fit_normalizers(&mut self, graphs: &[GraphFeatures]) {
        fn rms_scale(dim: usize, data: &[&[f64]]) -> Vec<f64> {
            let mut sum = vec![0.0; dim];
            let mut n = 0usize;
            for d in data {
                for row in d.chunks(dim) {
                    sum.iter_mut().zip(row).for_each(|(s, v)| *s += v * v);
                    n += 1;
                }
            }
            sum.iter()
                .map(|s| {
                    let rms = (s / n.max(1) as f64).sqrt();
                    if rms > 1e-12 {
                        1.0 / rms
                    } else {
                        1.0
                    }
                })
                .collect()
        }
        let nodes: Vec<&[f64]> = graphs.iter().map(|g| g.node_dyn.as_slice()).collect();
        let edges: Vec<&[f64]> = graphs.iter().map(|g| g.edge_dyn.as_slice()).collect();
        self.node_scale = rms_scale(NODE_DYN_DIM, &nodes);
        self.edge_scale = rms_scale(EDGE_DYN_DIM, &edges);
    }

    fn check_graph(&self, g: &GraphFeatures) -> Result<()> {
        if g.node_ctx_dim != self.config.node_ctx_dim() || g.offsets.len() != self.config.num_levels {
            return Err(Error::shape(format!(
                "model expects {} levels and {} attributes; scene has {} levels and {} attributes",
                self.config.num_levels,
                self.config.attribute_dim,
                g.offsets.len(),
                g.node_ctx_dim.saturating_sub(g.offsets.len())
            )));
        }
        Ok(())
    }

    fn scaled(data: &[f64], scale: &[f64]) -> Vec<f64> {
        data.chunks(scale.len())
            .flat_map(|row| row.iter().zip(scale).map(|(v, s)| v * s))
            .collect()
    }

    /// Records the forward pass; returns the output and the parameter ids.
    fn record(&self, tape: &mut Tape, g: &GraphFeatures) -> (Var, Vec<Var>) {
        let p: Vec<Var> = self.params.iter().map(|t| tape.leaf(t.clone())).collect();
        let n = g.n_nodes;
        let e = g.n_edges();
        let xdn = tape.leaf(Tensor::new(n, NODE_DYN_DIM, Self::scaled(&g.node_dyn, &self.node_scale)));
        let xcn = tape.leaf(Tensor::new(n, g.node_ctx_dim, g.node_ctx.clone()));
        let xde = tape.leaf(Tensor::new(e, EDGE_DYN_DIM, Self::scaled(&g.edge_dyn, &self.edge_scale)));
        let xce = tape.leaf(Tensor::new(e, EDGE_CTX_DIM, g.edge_ctx.clone()));

        let gated = |tape: &mut Tape, dyn_in: Var, w_dyn: Var, ctx_in: Var, w_ctx: Var| {
            let a = tape.matmul(dyn_in, w_dyn);
            let a = tape.tanh(a);
            let c = tape.matmul(ctx_in, w_ctx);
            let c = tape.add_scalar(c, 1.0);
            tape.mul(a, c)
        };
        let mut h = gated(tape, xdn, p[0], xcn, p[1]);
        let mut x = gated(tape, xde, p[2], xce, p[3]);
        for r in 0..self.config.rounds {
            let (we, wn) = (p[4 + 2 * r], p[5 + 2 * r]);
            let hs = tape.gather_rows(h, &g.src);
            let hd = tape.gather_rows(h, &g.dst);
            let cat = tape.concat_cols(&[x, hs, hd]);
            let upd = tape.matmul(cat, we);
            let upd = tape.tanh(upd);
            x = tape.add(x, upd);
            let agg = tape.scatter_mean(x, &g.dst, n);
            let cat = tape.concat_cols(&[h, agg]);
            let upd = tape.matmul(cat, wn);
            let upd = tape.tanh(upd);
            h = tape.add(h, upd);
        }
        let k = 4 + 2 * self.config.rounds;
        let d = tape.matmul(h, p[k]);
        let d = tape.tanh(d);
        let d = tape.matmul(d, p[k + 1]);
        let d = tape.tanh(d);
        let d = tape.matmul(d, p[k + 2]);
        let out = tape.add_row_bias(d, p[k + 3]);
        (out, p)
    }

    /// Raw `(nodes × 11)` output for a feature graph.
    pub fn predict_raw(&self, g: &GraphFeatures) -> Result<Tensor> {
        self.check_graph(g)?;
        let mut tape = Tape::new();
        let (out, _) = self.record(&mut tape, g);
        Ok(tape.value(out).clone())
    }

    pub fn predict_gradients(&self, input: &ProviderInput) -> Result<Vec<LevelDeformationField>> {
        let g = build_graph(input, &self.config.edges)?;
        let raw = self.predict_raw(&g)?;
        fields_from_raw(input.hierarchy, &raw.data, &g.offsets)
    }
}

/// Loss value and its gradient w.r.t. every parameter (same layout as
/// `model.params`).
pub fn model_gradient(model: &PredictorModel, g: &GraphFeatures, loss: &dyn OutputLoss) -> Result<(f64, Vec<Tensor>)> {
    model.check_graph(g)?;
    let mut tape = Tape::new();
    let (out, params) = model.record(&mut tape, g);
    let (value, seed) = loss.eval(tape.value(out))?;
    if seed.rows != tape.value(out).rows || seed.cols != OUTPUT_DIM {
        return Err(Error::shape("loss gradient does not match the output"));
    }
    let grads = tape.backward_from(out, seed);
    let param_grads = params
        .iter()
        .zip(&model.params)
        .map(|(id, p)| grads[*id].clone().unwrap_or_else(|| Tensor::zeros(p.rows, p.cols)))
        .collect();
    Ok((value, param_grads))
}

/// Disjoint union of feature graphs; node and edge rows are stacked.
pub fn union_graph(graphs: &[&GraphFeatures]) -> GraphFeatures {
    let mut u = GraphFeatures {
        n_nodes: 0,
        offsets: graphs.first().map(|g| g.offsets.clone()).unwrap_or_default(),
        node_dyn: Vec::new(),
        node_ctx: Vec::new(),
        node_ctx_dim: graphs.first().map_or(0, |g| g.node_ctx_dim),
        src: Vec::new(),
        dst: Vec::new(),
        edge_dyn: Vec::new(),
        edge_ctx: Vec::new(),
    };
    for g in graphs {
        let base = u.n_nodes;
        u.node_dyn.extend_from_slice(&g.node_dyn);
        u.node_ctx.extend_from_slice(&g.node_ctx);
        u.src.extend(g.src.iter().map(|s| s + base));
        u.dst.extend(g.dst.iter().map(|d| d + base));
        u.edge_dyn.extend_from_slice(&g.edge_dyn);
        u.edge_ctx.extend_from_slice(&g.edge_ctx);
        u.n_nodes += g.n_nodes;
    }
    u
}

/// The learned model behind the provider contract.
#[derive(Debug, Clone)]
pub struct LearnedProvider {
    pub model: PredictorModel,
}

impl LearnedProvider {
    pub fn new(model: PredictorModel) -> Self {
        Self { model }
    }
}

impl GradientProvider for LearnedProvider {
    fn name(&self) -> &str {
        "learned"
    }

    fn predict(&self, input: &ProviderInput) -> Result<Vec<LevelDeformationField>> {
        self.model.predict_gradients(input)
    }
}
