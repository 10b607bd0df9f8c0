//! SimCLR pretraining of the encoder and projection header.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_keyed, AugmentConfig};
use crate::autodiff::{Graph, NodeId};
use crate::bench::Sample;
use crate::error::{Error, Result};
use crate::model::{cosine_similarity, BoundParams, Branch, Model};
use crate::optim::{Sgd, SgdConfig};
use crate::rng::{keyed_rng, stream};
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    /// Temperature of the NT-Xent loss.
    pub tau_con: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub sgd: SgdConfig,
    pub augment: AugmentConfig,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau_con: 0.5,
            batch_size: 128,
            steps: 2000,
            sgd: SgdConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_con > 0.0) {
            return Err(Error::config("tau_con must be positive"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("contrastive batch_size must be positive"));
        }
        self.augment.validate()
    }
}

/// `−log( exp(h(q, c_pos)/τ) / Σ_i exp(h(q, c_i)/τ) )` with `h` the cosine
/// similarity; `positive` indexes into `candidates`.
pub fn ntxent_query_loss<V: AsRef<[f64]>>(
    query: &[f64],
    positive: usize,
    candidates: &[V],
    tau: f64,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::invalid("ntxent_query_loss", "empty candidate set"));
    }
    if positive >= candidates.len() {
        return Err(Error::invalid(
            "ntxent_query_loss",
            "positive is not among the candidates",
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(
            "ntxent_query_loss",
            "temperature must be positive",
        ));
    }
    let logits = candidates
        .iter()
        .map(|c| Ok(cosine_similarity(query, c.as_ref())? / tau))
        .collect::<Result<Vec<f64>>>()?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[positive])
}

/// NT-Xent over `2N` projections where rows `i` and `i + N` are positives.
/// Each query's candidates are all other rows.
pub fn ntxent_from_projections(g: &mut Graph, projections: NodeId, tau: f64) -> Result<NodeId> {
    let rows = g.value(projections).rows();
    if rows < 2 || !rows.is_multiple_of(2) {
        return Err(Error::invalid(
            "ntxent",
            format!("need an even number of views, got {rows}"),
        ));
    }
    let n = rows / 2;
    let z = g.l2_normalize_rows(projections)?;
    let zt = g.transpose(z)?;
    let sims = g.matmul(z, zt)?;
    let logits = g.scale(sims, 1.0 / tau)?;

    let mut cand = Vec::with_capacity(rows * (rows - 1));
    let mut pos = Vec::with_capacity(rows);
    for q in 0..rows {
        cand.extend((0..rows).filter(|&j| j != q).map(|j| q * rows + j));
        let p = (q + n) % rows;
        let col = if p < q { p } else { p - 1 };
        pos.push(q * (rows - 1) + col);
    }
    let cand = g.gather(logits, cand, vec![rows, rows - 1])?;
    let lsm = g.log_softmax_rows(cand)?;
    let picked = g.gather(lsm, pos, vec![rows])?;
    let mean = g.mean(picked)?;
    g.scale(mean, -1.0)
}

pub struct SimclrNodes {
    pub loss: NodeId,
    pub projections: NodeId,
}

/// Two views per sample, keyed by `(seed, round, sample id, view)`, forwarded
/// together through the main branch in train mode.
pub fn simclr_batch_loss(
    model: &mut Model,
    g: &mut Graph,
    bound: &BoundParams,
    batch: &[&Sample],
    config: &ContrastiveConfig,
    seed: u64,
    round: u64,
) -> Result<SimclrNodes> {
    if batch.is_empty() {
        return Err(Error::invalid("simclr_batch_loss", "empty batch"));
    }
    let mut views: Vec<Vec<f64>> = Vec::with_capacity(2 * batch.len());
    for view in 0..2u64 {
        for s in batch {
            views.push(augment_keyed(
                &s.features,
                &config.augment,
                seed,
                &[stream::PRETRAIN_AUGMENT, round, s.id, view],
            ));
        }
    }
    let x = g.input(Array::from_rows(&views)?);
    let out = model.forward_train(g, bound, x, Branch::Main)?;
    let loss = ntxent_from_projections(g, out.projection, config.tau_con)?;
    Ok(SimclrNodes {
        loss,
        projections: out.projection,
    })
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: Model,
    /// `(step, loss)` per optimizer step.
    pub trace: Vec<(usize, f64)>,
}

/// Runs `config.steps` SGD steps of SimCLR on `pool` (labels ignored).
pub fn pretrain(
    mut model: Model,
    pool: &[Sample],
    config: &ContrastiveConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    config.validate()?;
    let n = config.batch_size;
    if pool.len() < n {
        return Err(Error::invalid(
            "pretrain",
            format!(
                "pool of {} samples is smaller than batch size {n}",
                pool.len()
            ),
        ));
    }
    let per_epoch = pool.len() / n;
    let mut opt = Sgd::new(config.sgd.clone(), model.params().len());
    let mut trace = Vec::with_capacity(config.steps);
    let mut order: Vec<usize> = Vec::new();

    for step in 0..config.steps {
        let epoch = step / per_epoch;
        if step % per_epoch == 0 {
            order = (0..pool.len()).collect();
            order.shuffle(&mut keyed_rng(
                seed,
                &[stream::PRETRAIN_SHUFFLE, epoch as u64],
            ));
        }
        let offset = (step % per_epoch) * n;
        let batch: Vec<&Sample> = order[offset..offset + n]
            .iter()
            .map(|&i| &pool[i])
            .collect();

        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let nodes = simclr_batch_loss(
            &mut model,
            &mut g,
            &bound,
            &batch,
            config,
            seed,
            step as u64,
        )?;
        let loss = g.value(nodes.loss).item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let mut grads = g.backward(nodes.loss)?;
        let grads: Vec<Option<Array>> =
            bound.ids().iter().map(|&id| Some(grads.take(id))).collect();
        let lr = config.sgd.lr_at(step, config.steps);
        opt.step(model.params_mut(), &grads, lr);
        trace.push((step, loss));
    }
    Ok(PretrainOutcome { model, trace })
}
