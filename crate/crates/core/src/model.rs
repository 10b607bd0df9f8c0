//! Encoder, projection header and classifier head with dual-branch batch normalization.
//!
//! The encoder is a stack of `dense → batch-norm → relu` blocks ending in the
//! embedding. The projection header is a two-layer perceptron on the embedding
//! and the classifier head is a single dense layer on the embedding. Every
//! batch-norm layer keeps two sets of running statistics: the main branch and
//! an auxiliary branch used for out-of-class batches. Scale and shift are
//! shared between the branches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{column_moments, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::{keyed_rng, stream};
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    /// Embedding dimension `d_e`.
    pub embed_dim: usize,
    /// Projection dimension `d_p`.
    pub proj_dim: usize,
    pub num_classes: usize,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 16,
            hidden_dims: vec![64],
            embed_dim: 32,
            proj_dim: 16,
            num_classes: 8,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.proj_dim == 0 {
            return Err(Error::config(
                "input_dim, embed_dim and proj_dim must be positive",
            ));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden_dims must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if !(self.bn_epsilon > 0.0) {
            return Err(Error::config("bn_epsilon must be positive"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::config("bn_momentum must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Widths of the encoder's dense layers, input first.
    fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden_dims);
        w.push(self.embed_dim);
        w
    }

    /// Number of trainable scalars implied by the dimensions.
    pub fn parameter_count(&self) -> usize {
        let widths = self.encoder_widths();
        let encoder: usize = widths.windows(2).map(|w| w[0] * w[1] + 2 * w[1]).sum();
        let (e, p, c) = (self.embed_dim, self.proj_dim, self.num_classes);
        encoder + (e * e + e) + (e * p + p) + (e * c + c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Main,
    Aux,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn fresh(width: usize) -> Self {
        RunningStats {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualBatchNormState {
    pub main: RunningStats,
    pub aux: RunningStats,
}

impl DualBatchNormState {
    pub fn branch(&self, b: Branch) -> &RunningStats {
        match b {
            Branch::Main => &self.main,
            Branch::Aux => &self.aux,
        }
    }

    fn branch_mut(&mut self, b: Branch) -> &mut RunningStats {
        match b {
            Branch::Main => &mut self.main,
            Branch::Aux => &mut self.aux,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array,
}

#[derive(Clone, Debug, PartialEq)]
struct EncoderLayer {
    weight: usize,
    scale: usize,
    shift: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    encoder: Vec<EncoderLayer>,
    proj: [usize; 4],
    classifier: [usize; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    bn: Vec<DualBatchNormState>,
    layout: Layout,
}

/// Graph leaves holding a model's parameters, in registry order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    ids: Vec<NodeId>,
}

impl BoundParams {
    /// Uses arbitrary graph nodes as the parameters, in registry order.
    pub fn from_ids(ids: Vec<NodeId>) -> Self {
        BoundParams { ids }
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub embedding: NodeId,
    pub projection: NodeId,
    pub logits: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardRecord {
    pub embedding: Array,
    pub projection: Array,
    pub logits: Array,
}

struct BatchMoments {
    mean: Vec<f64>,
    var: Vec<f64>,
}

fn uniform_array(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Array {
    let n = shape.iter().product();
    Array::from_parts(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
    )
}

/// `u·v / (‖u‖‖v‖)`, or 0 when either norm is below 1e-12.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            lhs: vec![u.len()],
            rhs: vec![v.len()],
        });
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < 1e-12 || nv < 1e-12 {
        return Ok(0.0);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

impl Model {
    /// Builds a model with seeded uniform fan-in initialization
    /// (`±1/√fan_in`) and fresh batch-norm statistics in both branches.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = keyed_rng(seed, &[stream::MODEL_INIT]);
        let mut params = Vec::new();
        let push = |params: &mut Vec<Param>, name: String, value: Array| {
            params.push(Param { name, value });
            params.len() - 1
        };

        let widths = config.encoder_widths();
        let mut encoder = Vec::new();
        let mut bn = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let weight = push(
                &mut params,
                format!("encoder.{i}.weight"),
                uniform_array(&mut rng, &[w[0], w[1]], bound),
            );
            let scale = push(
                &mut params,
                format!("encoder.{i}.bn.scale"),
                Array::full(&[1, w[1]], 1.0),
            );
            let shift = push(
                &mut params,
                format!("encoder.{i}.bn.shift"),
                Array::zeros(&[1, w[1]]),
            );
            encoder.push(EncoderLayer {
                weight,
                scale,
                shift,
            });
            bn.push(DualBatchNormState {
                main: RunningStats::fresh(w[1]),
                aux: RunningStats::fresh(w[1]),
            });
        }

        let (e, p, c) = (config.embed_dim, config.proj_dim, config.num_classes);
        let be = 1.0 / (e as f64).sqrt();
        let proj = [
            push(
                &mut params,
                "proj.0.weight".into(),
                uniform_array(&mut rng, &[e, e], be),
            ),
            push(
                &mut params,
                "proj.0.bias".into(),
                uniform_array(&mut rng, &[1, e], be),
            ),
            push(
                &mut params,
                "proj.1.weight".into(),
                uniform_array(&mut rng, &[e, p], be),
            ),
            push(
                &mut params,
                "proj.1.bias".into(),
                uniform_array(&mut rng, &[1, p], be),
            ),
        ];
        let classifier = [
            push(
                &mut params,
                "classifier.weight".into(),
                uniform_array(&mut rng, &[e, c], be),
            ),
            push(
                &mut params,
                "classifier.bias".into(),
                uniform_array(&mut rng, &[1, c], be),
            ),
        ];

        Ok(Model {
            config,
            params,
            bn,
            layout: Layout {
                encoder,
                proj,
                classifier,
            },
        })
    }

    /// Reassembles a model from stored parts; names and shapes must match a fresh build.
    pub fn from_parts(
        config: ModelConfig,
        params: Vec<Param>,
        bn: Vec<DualBatchNormState>,
    ) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        if params.len() != model.params.len() || bn.len() != model.bn.len() {
            return Err(Error::Checkpoint(
                "parameter or batch-norm count does not match config".into(),
            ));
        }
        for (have, want) in params.iter().zip(&model.params) {
            if have.name != want.name || have.value.shape() != want.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    have.name,
                    have.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        for (have, want) in bn.iter().zip(&model.bn) {
            if have.main.mean.len() != want.main.mean.len()
                || have.main.var.len() != want.main.var.len()
                || have.aux.mean.len() != want.aux.mean.len()
                || have.aux.var.len() != want.aux.var.len()
            {
                return Err(Error::Checkpoint(
                    "batch-norm width does not match config".into(),
                ));
            }
        }
        model.params = params;
        model.bn = bn;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn batch_norm_states(&self) -> &[DualBatchNormState] {
        &self.bn
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registry indices of the encoder's parameters (dense weights and batch-norm affine terms).
    pub fn encoder_param_indices(&self) -> Vec<usize> {
        self.layout
            .encoder
            .iter()
            .flat_map(|l| [l.weight, l.scale, l.shift])
            .collect()
    }

    /// Registry indices of the classifier head.
    pub fn classifier_param_indices(&self) -> [usize; 2] {
        self.layout.classifier
    }

    /// Replaces the classifier head with freshly initialized weights.
    pub fn reset_classifier(&mut self, seed: u64) {
        let mut rng = keyed_rng(seed, &[stream::CLASSIFIER_INIT]);
        let (e, c) = (self.config.embed_dim, self.config.num_classes);
        let bound = 1.0 / (e as f64).sqrt();
        let [w, b] = self.layout.classifier;
        self.params[w].value = uniform_array(&mut rng, &[e, c], bound);
        self.params[b].value = uniform_array(&mut rng, &[1, c], bound);
    }

    /// Records every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            ids: self
                .params
                .iter()
                .map(|p| g.input(p.value.clone()))
                .collect(),
        }
    }

    fn check_batch(&self, x: &Array, mode: Mode) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: x.shape().to_vec(),
                rhs: vec![x.rows(), self.config.input_dim],
            });
        }
        if mode == Mode::Train && x.rows() < 2 {
            return Err(Error::invalid(
                "forward",
                "train-mode batch needs at least 2 rows",
            ));
        }
        Ok(())
    }

    fn forward_impl(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        x: NodeId,
        branch: Branch,
        mode: Mode,
    ) -> Result<(ForwardNodes, Vec<BatchMoments>)> {
        self.check_batch(g.value(x), mode)?;
        let p = &bound.ids;
        let eps = self.config.bn_epsilon;
        let mut moments = Vec::new();
        let mut h = x;
        for (layer, state) in self.layout.encoder.iter().zip(&self.bn) {
            let z = g.matmul(h, p[layer.weight])?;
            let normalized = match mode {
                Mode::Train => {
                    let (mean, var) = column_moments(g.value(z));
                    moments.push(BatchMoments { mean, var });
                    g.batch_norm(z, eps)?
                }
                Mode::Eval => {
                    let stats = state.branch(branch);
                    let width = stats.mean.len();
                    let shift = g.input(Array::from_parts(
                        vec![1, width],
                        stats.mean.iter().map(|m| -m).collect(),
                    ));
                    let inv = g.input(Array::from_parts(
                        vec![1, width],
                        stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect(),
                    ));
                    let centered = g.add(z, shift)?;
                    g.mul(centered, inv)?
                }
            };
            let scaled = g.mul(normalized, p[layer.scale])?;
            let shifted = g.add(scaled, p[layer.shift])?;
            h = g.relu(shifted)?;
        }
        let embedding = h;

        let [w0, b0, w1, b1] = self.layout.proj;
        let a = g.matmul(embedding, p[w0])?;
        let a = g.add(a, p[b0])?;
        let a = g.relu(a)?;
        let a = g.matmul(a, p[w1])?;
        let projection = g.add(a, p[b1])?;

        let [wc, bc] = self.layout.classifier;
        let l = g.matmul(embedding, p[wc])?;
        let logits = g.add(l, p[bc])?;

        Ok((
            ForwardNodes {
                embedding,
                projection,
                logits,
            },
            moments,
        ))
    }

    /// Train-mode forward: batch statistics normalize the batch and are folded
    /// into the running statistics of `branch` only.
    pub fn forward_train(
        &mut self,
        g: &mut Graph,
        bound: &BoundParams,
        x: NodeId,
        branch: Branch,
    ) -> Result<ForwardNodes> {
        let (nodes, moments) = self.forward_impl(g, bound, x, branch, Mode::Train)?;
        let rows = g.value(x).rows() as f64;
        let m = self.config.bn_momentum;
        for (state, batch) in self.bn.iter_mut().zip(moments) {
            let stats = state.branch_mut(branch);
            for (r, b) in stats.mean.iter_mut().zip(&batch.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            // Running variance tracks the unbiased batch variance.
            let correction = rows / (rows - 1.0);
            for (r, b) in stats.var.iter_mut().zip(&batch.var) {
                *r = (1.0 - m) * *r + m * b * correction;
            }
        }
        Ok(nodes)
    }

    /// Eval-mode forward using the running statistics of `branch`.
    pub fn forward_eval(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        x: NodeId,
        branch: Branch,
    ) -> Result<ForwardNodes> {
        Ok(self.forward_impl(g, bound, x, branch, Mode::Eval)?.0)
    }

    /// Array-level forward.
    pub fn forward(&mut self, batch: &Array, branch: Branch, mode: Mode) -> Result<ForwardRecord> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let x = g.input(batch.clone());
        let nodes = match mode {
            Mode::Train => self.forward_train(&mut g, &bound, x, branch)?,
            Mode::Eval => self.forward_eval(&mut g, &bound, x, branch)?,
        };
        Ok(ForwardRecord {
            embedding: g.value(nodes.embedding).clone(),
            projection: g.value(nodes.projection).clone(),
            logits: g.value(nodes.logits).clone(),
        })
    }

    /// Normalizes with the batch's own statistics, as in training, without
    /// touching any running statistics.
    pub fn forward_batch_stats(&self, batch: &Array) -> Result<ForwardRecord> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let x = g.input(batch.clone());
        let (nodes, _) = self.forward_impl(&mut g, &bound, x, Branch::Main, Mode::Train)?;
        Ok(ForwardRecord {
            embedding: g.value(nodes.embedding).clone(),
            projection: g.value(nodes.projection).clone(),
            logits: g.value(nodes.logits).clone(),
        })
    }

    /// Eval-mode, main-branch forward.
    pub fn infer(&self, batch: &Array) -> Result<ForwardRecord> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let x = g.input(batch.clone());
        let nodes = self.forward_eval(&mut g, &bound, x, Branch::Main)?;
        Ok(ForwardRecord {
            embedding: g.value(nodes.embedding).clone(),
            projection: g.value(nodes.projection).clone(),
            logits: g.value(nodes.logits).clone(),
        })
    }
}
