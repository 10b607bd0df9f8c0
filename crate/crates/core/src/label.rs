//! Soft-labels for detected out-of-class samples, top-k pseudo-labels for
//! detected in-class samples, and class-balancing oversampling.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Graph};
use crate::bench::{feature_matrix, Sample};
use crate::error::{Error, Result};
use crate::model::{Model, Param};
use crate::optim::{Sgd, SgdConfig};
use crate::rng::{keyed_rng, stream};
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelingConfig {
    /// Soft-label temperature.
    pub tau_sl: f64,
    /// Fraction of detected in-class samples that receive pseudo-labels.
    pub k_fraction: f64,
    pub linear_eval_steps: usize,
    pub linear_eval_sgd: SgdConfig,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        LabelingConfig {
            tau_sl: 0.1,
            k_fraction: 0.1,
            linear_eval_steps: 300,
            linear_eval_sgd: SgdConfig {
                learning_rate: 0.1,
                ..SgdConfig::default()
            },
        }
    }
}

impl LabelingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_sl > 0.0) {
            return Err(Error::config("tau_sl must be positive"));
        }
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return Err(Error::config("k_fraction must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabel {
    pub q: Vec<f64>,
}

/// Temperature softmax over class similarities.
pub fn soft_label(sims: &[f64], tau_sl: f64) -> SoftLabel {
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = sims.iter().map(|s| ((s - max) / tau_sl).exp()).collect();
    let total: f64 = e.iter().sum();
    SoftLabel {
        q: e.into_iter().map(|v| v / total).collect(),
    }
}

/// A dense layer over frozen embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: Array,
    pub bias: Array,
}

impl LinearHead {
    pub fn probabilities(&self, embeddings: &Array) -> Result<Array> {
        let mut logits = embeddings.matmul(&self.weight)?;
        let c = logits.cols();
        for row in logits.data_mut().chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Ok(softmax_rows(&logits))
    }
}

pub(crate) fn one_hot(labels: &[usize], classes: usize) -> Array {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Array::from_parts(vec![labels.len(), classes], data)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains a fresh linear classifier on eval-mode main-branch embeddings of
/// `labeled` by full-batch cross-entropy. The encoder is not touched.
pub fn train_linear_eval(
    model: &Model,
    labeled: &[Sample],
    config: &LabelingConfig,
    seed: u64,
) -> Result<LinearHead> {
    if labeled.is_empty() {
        return Err(Error::invalid("train_linear_eval", "no labeled samples"));
    }
    let c = model.config().num_classes;
    let labels = labeled
        .iter()
        .map(|s| {
            s.label.ok_or_else(|| {
                Error::invalid("train_linear_eval", format!("sample {} is unlabeled", s.id))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let embeddings = model.infer(&feature_matrix(labeled)?)?.embedding;
    let targets = one_hot(&labels, c);
    let d = embeddings.cols();

    let mut rng = keyed_rng(seed, &[stream::LINEAR_EVAL]);
    let bound = 1.0 / (d as f64).sqrt();
    let mut params = vec![
        Param {
            name: "linear.weight".into(),
            value: Array::from_parts(
                vec![d, c],
                (0..d * c)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect(),
            ),
        },
        Param {
            name: "linear.bias".into(),
            value: Array::zeros(&[1, c]),
        },
    ];
    let mut opt = Sgd::new(config.linear_eval_sgd.clone(), 2);
    for step in 0..config.linear_eval_steps {
        let mut g = Graph::new();
        let x = g.input(embeddings.clone());
        let w = g.input(params[0].value.clone());
        let b = g.input(params[1].value.clone());
        let logits = g.matmul(x, w)?;
        let logits = g.add(logits, b)?;
        let loss = g.soft_cross_entropy(logits, &targets)?;
        if !g.value(loss).item().is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let mut grads = g.backward(loss)?;
        let grads = [Some(grads.take(w)), Some(grads.take(b))];
        let lr = config.linear_eval_sgd.lr_at(step, config.linear_eval_steps);
        opt.step(&mut params, &grads, lr);
    }
    let mut it = params.into_iter();
    Ok(LinearHead {
        weight: it.next().expect("weight").value,
        bias: it.next().expect("bias").value,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoLabel {
    pub id: u64,
    pub class: usize,
    pub confidence: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabeledSet {
    pub entries: Vec<PseudoLabel>,
}

/// `ceil(k · n)`, tolerant of representation error in `k · n`.
pub fn topk_count(k_fraction: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    ((k_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Keeps the `ceil(k·n)` most confident rows of `probs`; confidence is the
/// max probability, ties broken by ascending id.
pub fn select_topk_from_probs(ids: &[u64], probs: &Array, k_fraction: f64) -> PseudoLabeledSet {
    let mut all: Vec<PseudoLabel> = ids
        .iter()
        .zip(probs.row_iter())
        .map(|(&id, row)| {
            let class = argmax(row);
            PseudoLabel {
                id,
                class,
                confidence: row[class],
            }
        })
        .collect();
    all.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.id.cmp(&b.id)));
    all.truncate(topk_count(k_fraction, ids.len()));
    PseudoLabeledSet { entries: all }
}

pub fn select_topk(
    in_set: &[Sample],
    head: &LinearHead,
    model: &Model,
    k_fraction: f64,
) -> Result<PseudoLabeledSet> {
    if in_set.is_empty() {
        return Ok(PseudoLabeledSet::default());
    }
    let embeddings = model.infer(&feature_matrix(in_set)?)?.embedding;
    let probs = head.probabilities(&embeddings)?;
    let ids: Vec<u64> = in_set.iter().map(|s| s.id).collect();
    Ok(select_topk_from_probs(&ids, &probs, k_fraction))
}

/// Duplicates samples of minority classes round-robin until every class has
/// as many samples as the largest one. Output is grouped by class.
pub fn oversample(labeled: &[Sample]) -> Result<Vec<Sample>> {
    let mut by_class: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    for s in labeled {
        let l = s
            .label
            .ok_or_else(|| Error::invalid("oversample", format!("sample {} is unlabeled", s.id)))?;
        by_class.entry(l).or_default().push(s);
    }
    let target = by_class.values().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::with_capacity(target * by_class.len());
    for members in by_class.values() {
        out.extend((0..target).map(|i| members[i % members.len()].clone()));
    }
    Ok(out)
}
