//! Semi-supervised fine-tuning: a consistency backend, the combined open-set
//! objective with its auxiliary soft-label term, and the training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_keyed, AugmentConfig};
use crate::autodiff::{softmax_rows, Graph, NodeId};
use crate::bench::Sample;
use crate::error::{Error, Result};
use crate::label::{argmax, one_hot, SoftLabel};
use crate::metrics::accuracy;
use crate::model::{BoundParams, Branch, Model};
use crate::optim::{Sgd, SgdConfig};
use crate::rng::{keyed_rng, stream};
use crate::tensor::Array;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Backend {
    /// Cross-entropy between predictions on two independent views.
    Consistency,
    /// One-hot targets from the weak view where its confidence exceeds
    /// `threshold`, applied to a view with doubled noise.
    HardPseudo { threshold: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub detect: bool,
    pub aux_loss: bool,
    pub aux_bn: bool,
    pub topk_pl: bool,
}

impl Toggles {
    pub fn all() -> Self {
        Toggles {
            detect: true,
            aux_loss: true,
            aux_bn: true,
            topk_pl: true,
        }
    }

    pub fn none() -> Self {
        Toggles {
            detect: false,
            aux_loss: false,
            aux_bn: false,
            topk_pl: false,
        }
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles::all()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslConfig {
    /// Weight of the unlabeled consistency term.
    pub beta: f64,
    /// Weight of the out-of-class soft-label term.
    pub lambda: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub sgd: SgdConfig,
    pub backend: Backend,
    pub toggles: Toggles,
    /// Test accuracy is recorded every this many labeled training samples.
    pub checkpoint_interval: usize,
    pub augment: AugmentConfig,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            beta: 1.0,
            lambda: 0.5,
            batch_size: 64,
            steps: 500,
            sgd: SgdConfig::default(),
            backend: Backend::Consistency,
            toggles: Toggles::all(),
            checkpoint_interval: 640,
            augment: AugmentConfig::default(),
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta must be finite and nonnegative"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be finite and nonnegative"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("ssl batch_size must be at least 2"));
        }
        if let Backend::HardPseudo { threshold } = self.backend {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(Error::config("hard-pseudo threshold must lie in [0, 1]"));
            }
        }
        self.augment.validate()
    }

    fn strong_augment(&self) -> AugmentConfig {
        match self.backend {
            Backend::Consistency => self.augment.clone(),
            Backend::HardPseudo { .. } => self.augment.with_noise_scaled(2.0),
        }
    }
}

/// Two views of an unlabeled batch: the detached target built from the
/// first view, and the second view that receives gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyInputs {
    pub target: Array,
    pub view: Array,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutInputs {
    pub x: Array,
    pub q: Array,
}

/// Everything one optimizer step consumes, already augmented.
#[derive(Clone, Debug, PartialEq)]
pub struct StepBatch {
    pub labeled_x: Array,
    pub labeled_y: Array,
    pub unlabeled: Option<ConsistencyInputs>,
    pub out: Option<OutInputs>,
}

#[derive(Clone, Copy, Debug)]
pub struct SslNodes {
    pub total: NodeId,
    pub supervised: NodeId,
    pub consistency: Option<NodeId>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub ssl: SslNodes,
    pub aux: Option<NodeId>,
}

/// Target distribution for the consistency term, computed from the weak view
/// with batch statistics and held constant during differentiation.
pub fn consistency_target(model: &Model, weak: &Array, backend: Backend) -> Result<Array> {
    let probs = softmax_rows(&model.forward_batch_stats(weak)?.logits);
    Ok(match backend {
        Backend::Consistency => probs,
        Backend::HardPseudo { threshold } => {
            let c = probs.cols();
            let mut target = Array::zeros(&[probs.rows(), c]);
            for (i, row) in probs.row_iter().enumerate() {
                let k = argmax(row);
                if row[k] > threshold {
                    target.data_mut()[i * c + k] = 1.0;
                }
            }
            target
        }
    })
}

/// `H(y_l, f(x_l)) + β·H(target, f(view))`, all forwards on the main branch.
pub fn ssl_loss(
    model: &mut Model,
    g: &mut Graph,
    bound: &BoundParams,
    labeled_x: &Array,
    labeled_y: &Array,
    unlabeled: Option<&ConsistencyInputs>,
    beta: f64,
) -> Result<SslNodes> {
    let x = g.input(labeled_x.clone());
    let out = model.forward_train(g, bound, x, Branch::Main)?;
    let supervised = g.soft_cross_entropy(out.logits, labeled_y)?;
    let Some(u) = unlabeled else {
        return Ok(SslNodes {
            total: supervised,
            supervised,
            consistency: None,
        });
    };
    let v = g.input(u.view.clone());
    let out = model.forward_train(g, bound, v, Branch::Main)?;
    let consistency = g.soft_cross_entropy(out.logits, &u.target)?;
    let weighted = g.scale(consistency, beta)?;
    let total = g.add(supervised, weighted)?;
    Ok(SslNodes {
        total,
        supervised,
        consistency: Some(consistency),
    })
}

fn check_distributions(q: &Array) -> Result<()> {
    for (i, row) in q.row_iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid(
                "opencos_loss",
                format!("soft-label row {i} sums to {sum}"),
            ));
        }
    }
    Ok(())
}

/// The semi-supervised loss plus `λ·H(q, f(x_out))`. The out-of-class forward
/// runs through the auxiliary branch when `aux_bn` is on. The term is left out
/// entirely when `aux_loss` is off or `λ = 0`.
pub fn opencos_loss(
    model: &mut Model,
    g: &mut Graph,
    bound: &BoundParams,
    batch: &StepBatch,
    config: &SslConfig,
) -> Result<LossNodes> {
    if let Some(out) = &batch.out {
        check_distributions(&out.q)?;
    }
    let ssl = ssl_loss(
        model,
        g,
        bound,
        &batch.labeled_x,
        &batch.labeled_y,
        batch.unlabeled.as_ref(),
        config.beta,
    )?;
    let out = match &batch.out {
        Some(out) if config.toggles.aux_loss && config.lambda != 0.0 => out,
        _ => {
            return Ok(LossNodes {
                total: ssl.total,
                ssl,
                aux: None,
            })
        }
    };
    let branch = if config.toggles.aux_bn {
        Branch::Aux
    } else {
        Branch::Main
    };
    let x = g.input(out.x.clone());
    let nodes = model.forward_train(g, bound, x, branch)?;
    let aux = g.soft_cross_entropy(nodes.logits, &out.q)?;
    let weighted = g.scale(aux, config.lambda)?;
    let total = g.add(ssl.total, weighted)?;
    Ok(LossNodes {
        total,
        ssl,
        aux: Some(aux),
    })
}

/// Stream slots used in augmentation keys.
const LABELED: u64 = 0;
const IN_CLASS: u64 = 1;
const OUT_CLASS: u64 = 2;

fn views(
    samples: &[&Sample],
    augment: &AugmentConfig,
    seed: u64,
    keys: [u64; 3],
    view: u64,
) -> Result<Array> {
    let rows: Vec<Vec<f64>> = samples
        .iter()
        .enumerate()
        .map(|(slot, s)| {
            augment_keyed(
                &s.features,
                augment,
                seed,
                &[keys[0], keys[1], keys[2], slot as u64, view],
            )
        })
        .collect();
    Array::from_rows(&rows)
}

/// Augments one step's worth of samples. Keys depend on the step, the stream
/// and the slot within the batch, never on what other streams contain.
pub fn prepare_batch(
    model: &Model,
    labeled: &[&Sample],
    in_class: &[&Sample],
    out_class: &[(&Sample, &SoftLabel)],
    config: &SslConfig,
    seed: u64,
    step: u64,
) -> Result<StepBatch> {
    let c = model.config().num_classes;
    let labels = labeled
        .iter()
        .map(|s| match s.label {
            Some(l) if l < c => Ok(l),
            _ => Err(Error::invalid(
                "prepare_batch",
                format!("sample {} has no valid label", s.id),
            )),
        })
        .collect::<Result<Vec<_>>>()?;
    let labeled_x = views(
        labeled,
        &config.augment,
        seed,
        [stream::TRAIN_AUGMENT, step, LABELED],
        0,
    )?;
    let unlabeled = if in_class.is_empty() {
        None
    } else {
        let weak = views(
            in_class,
            &config.augment,
            seed,
            [stream::TRAIN_AUGMENT, step, IN_CLASS],
            0,
        )?;
        let view = views(
            in_class,
            &config.strong_augment(),
            seed,
            [stream::TRAIN_AUGMENT, step, IN_CLASS],
            1,
        )?;
        Some(ConsistencyInputs {
            target: consistency_target(model, &weak, config.backend)?,
            view,
        })
    };
    let out = if out_class.is_empty() {
        None
    } else {
        let samples: Vec<&Sample> = out_class.iter().map(|(s, _)| *s).collect();
        let q: Vec<&[f64]> = out_class.iter().map(|(_, q)| q.q.as_slice()).collect();
        Some(OutInputs {
            x: views(
                &samples,
                &config.augment,
                seed,
                [stream::TRAIN_AUGMENT, step, OUT_CLASS],
                0,
            )?,
            q: Array::from_rows(&q)?,
        })
    };
    Ok(StepBatch {
        labeled_x,
        labeled_y: one_hot(&labels, c),
        unlabeled,
        out,
    })
}

/// Endless reshuffled pass over `len` items; a short stream simply wraps.
struct BatchStream {
    len: usize,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
    keys: [u64; 2],
}

impl BatchStream {
    fn new(len: usize, seed: u64, keys: [u64; 2]) -> Self {
        BatchStream {
            len,
            order: Vec::new(),
            pos: 0,
            epoch: 0,
            seed,
            keys,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        if self.len == 0 {
            return out;
        }
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order = (0..self.len).collect();
                self.order.shuffle(&mut keyed_rng(
                    self.seed,
                    &[self.keys[0], self.keys[1], self.epoch],
                ));
                self.epoch += 1;
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Training inputs: labeled set (real plus pseudo-labels, oversampled),
/// detected in-class samples and detected out-of-class samples with soft-labels.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub labeled: Vec<Sample>,
    pub in_class: Vec<Sample>,
    pub out_class: Vec<(Sample, SoftLabel)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub samples_seen: usize,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
    pub ssl: f64,
    pub aux: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Sgd,
    pub step: usize,
    /// Append-only.
    pub history: Vec<Checkpoint>,
    pub trace: Vec<TraceRow>,
}

impl TrainState {
    pub fn new(model: Model, sgd: SgdConfig) -> Self {
        let n = model.params().len();
        TrainState {
            model,
            optimizer: Sgd::new(sgd, n),
            step: 0,
            history: Vec::new(),
            trace: Vec::new(),
        }
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.history.iter().map(|c| c.accuracy).collect()
    }
}

fn pick<'a, T>(items: &'a [T], idx: &[usize]) -> Vec<&'a T> {
    idx.iter().map(|&i| &items[i]).collect()
}

/// Runs `config.steps` updates of the combined loss over 1:1:1 batches of
/// labeled, in-class and out-of-class samples. `on_checkpoint` is called
/// after each checkpoint is appended.
pub fn train<F>(
    mut state: TrainState,
    data: &TrainData,
    test: &[Sample],
    config: &SslConfig,
    seed: u64,
    mut on_checkpoint: F,
) -> Result<TrainState>
where
    F: FnMut(&TrainState, &Checkpoint) -> Result<()>,
{
    config.validate()?;
    if data.labeled.is_empty() {
        return Err(Error::invalid("train", "labeled set is empty"));
    }
    let b = config.batch_size;
    let mut streams = [
        BatchStream::new(data.labeled.len(), seed, [stream::TRAIN_SHUFFLE, LABELED]),
        BatchStream::new(data.in_class.len(), seed, [stream::TRAIN_SHUFFLE, IN_CLASS]),
        BatchStream::new(
            data.out_class.len(),
            seed,
            [stream::TRAIN_SHUFFLE, OUT_CLASS],
        ),
    ];
    for local in 0..config.steps {
        let step = state.step;
        let labeled = pick(&data.labeled, &streams[0].next(b));
        let in_class = pick(&data.in_class, &streams[1].next(b));
        let out_class: Vec<(&Sample, &SoftLabel)> = pick(&data.out_class, &streams[2].next(b))
            .into_iter()
            .map(|(s, q)| (s, q))
            .collect();
        let batch = prepare_batch(
            &state.model,
            &labeled,
            &in_class,
            &out_class,
            config,
            seed,
            step as u64,
        )?;

        let mut g = Graph::new();
        let bound = state.model.bind(&mut g);
        let nodes = opencos_loss(&mut state.model, &mut g, &bound, &batch, config)?;
        let total = g.value(nodes.total).item();
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let mut grads = g.backward(nodes.total)?;
        let grads: Vec<Option<Array>> =
            bound.ids().iter().map(|&id| Some(grads.take(id))).collect();
        let lr = config.sgd.lr_at(local, config.steps);
        state.optimizer.step(state.model.params_mut(), &grads, lr);
        state.step += 1;

        let seen = state.step * b;
        let interval = config.checkpoint_interval;
        let checkpoint = if interval > 0 && seen / interval > (seen - b) / interval {
            let c = Checkpoint {
                step: state.step,
                samples_seen: seen,
                accuracy: accuracy(&state.model, test)?,
            };
            state.history.push(c);
            Some(c)
        } else {
            None
        };
        state.trace.push(TraceRow {
            step,
            total,
            ssl: g.value(nodes.ssl.total).item(),
            aux: nodes.aux.map(|a| g.value(a).item()),
            test_accuracy: checkpoint.map(|c| c.accuracy),
        });
        if let Some(c) = checkpoint {
            on_checkpoint(&state, &c)?;
        }
    }
    Ok(state)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuxOnlyRow {
    pub step: usize,
    pub loss: f64,
    /// Mean entropy of the batch predictions before the update.
    pub mean_entropy: f64,
}

#[derive(Clone, Debug)]
pub struct AuxOnlyOutcome {
    pub model: Model,
    pub trace: Vec<AuxOnlyRow>,
}

/// Minimizes `H(q, f(x_out))` alone on the main branch, starting from `model`.
pub fn aux_only_train(
    mut model: Model,
    out_class: &[(Sample, SoftLabel)],
    config: &SslConfig,
    seed: u64,
) -> Result<AuxOnlyOutcome> {
    config.validate()?;
    if config.steps > 0 && out_class.is_empty() {
        return Err(Error::invalid("aux_only_train", "no out-of-class samples"));
    }
    let mut opt = Sgd::new(config.sgd.clone(), model.params().len());
    let mut batches = BatchStream::new(out_class.len(), seed, [stream::AUX_ONLY, 0]);
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let chosen = pick(out_class, &batches.next(config.batch_size));
        let samples: Vec<&Sample> = chosen.iter().map(|(s, _)| s).collect();
        let q: Vec<&[f64]> = chosen.iter().map(|(_, q)| q.q.as_slice()).collect();
        let q = Array::from_rows(&q)?;
        check_distributions(&q)?;
        let x = views(
            &samples,
            &config.augment,
            seed,
            [stream::AUX_ONLY, step as u64, 1],
            0,
        )?;

        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let xn = g.input(x);
        let nodes = model.forward_train(&mut g, &bound, xn, Branch::Main)?;
        let loss = g.soft_cross_entropy(nodes.logits, &q)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let probs = softmax_rows(g.value(nodes.logits));
        let mean_entropy = probs
            .row_iter()
            .map(|r| {
                -r.iter()
                    .filter(|&&p| p > 0.0)
                    .map(|p| p * p.ln())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / probs.rows() as f64;
        let mut grads = g.backward(loss)?;
        let grads: Vec<Option<Array>> =
            bound.ids().iter().map(|&id| Some(grads.take(id))).collect();
        opt.step(
            model.params_mut(),
            &grads,
            config.sgd.lr_at(step, config.steps),
        );
        trace.push(AuxOnlyRow {
            step,
            loss: value,
            mean_entropy,
        });
    }
    Ok(AuxOnlyOutcome { model, trace })
}
