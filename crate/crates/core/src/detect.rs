//! Prototype-based out-of-class detection.
//!
//! Prototypes are per-class means of labeled projections. An unlabeled
//! sample's score is its maximum cosine similarity to any prototype; samples
//! scoring below `t = μ_l − η·σ_l` (moments over labeled scores) are flagged
//! out-of-class.

use serde::{Deserialize, Serialize};

use crate::bench::{feature_matrix, Sample};
use crate::error::{Error, Result};
use crate::model::{cosine_similarity, Model};
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl PrototypeSet {
    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub id: u64,
    pub sims: Vec<f64>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    pub eta: f64,
    pub explicit_threshold: Option<f64>,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            eta: 2.0,
            explicit_threshold: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub mu: f64,
    pub sigma: f64,
    pub eta: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub in_ids: Vec<u64>,
    pub out_ids: Vec<u64>,
}

/// Per-class means of the rows of `projections`.
pub fn prototypes_from_projections(
    projections: &Array,
    labels: &[usize],
    num_classes: usize,
) -> Result<PrototypeSet> {
    if projections.rows() != labels.len() {
        return Err(Error::invalid(
            "compute_prototypes",
            "label count does not match projections",
        ));
    }
    let d = projections.cols();
    let mut sums = vec![vec![0.0; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (row, &label) in projections.row_iter().zip(labels) {
        if label >= num_classes {
            return Err(Error::invalid(
                "compute_prototypes",
                format!("label {label} out of range"),
            ));
        }
        counts[label] += 1;
        for (s, v) in sums[label].iter_mut().zip(row) {
            *s += v;
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(c));
    }
    let prototypes = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();
    Ok(PrototypeSet { prototypes, counts })
}

/// Eval-mode main-branch projections of `samples`.
pub fn project(samples: &[Sample], model: &Model) -> Result<Array> {
    Ok(model.infer(&feature_matrix(samples)?)?.projection)
}

pub fn compute_prototypes(labeled: &[Sample], model: &Model) -> Result<PrototypeSet> {
    let labels = labeled
        .iter()
        .map(|s| {
            s.label.ok_or_else(|| {
                Error::invalid(
                    "compute_prototypes",
                    format!("sample {} is unlabeled", s.id),
                )
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let c = model.config().num_classes;
    if labeled.is_empty() {
        return Err(Error::EmptyClass(0));
    }
    prototypes_from_projections(&project(labeled, model)?, &labels, c)
}

/// Cosine similarity of one projection to each prototype.
pub fn similarities_of(projection: &[f64], prototypes: &PrototypeSet) -> Result<Vec<f64>> {
    prototypes
        .prototypes
        .iter()
        .map(|v| cosine_similarity(projection, v))
        .collect()
}

pub fn class_similarities(
    x: &Sample,
    prototypes: &PrototypeSet,
    model: &Model,
) -> Result<Vec<f64>> {
    let p = project(std::slice::from_ref(x), model)?;
    similarities_of(p.row(0), prototypes)
}

pub fn detection_score(sims: &[f64]) -> Result<f64> {
    if sims.is_empty() {
        return Err(Error::invalid("detection_score", "empty similarity vector"));
    }
    Ok(sims.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Scores every sample against the prototypes.
pub fn score_samples(
    samples: &[Sample],
    prototypes: &PrototypeSet,
    model: &Model,
) -> Result<Vec<ScoredSample>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let proj = project(samples, model)?;
    samples
        .iter()
        .zip(proj.row_iter())
        .map(|(s, row)| {
            let sims = similarities_of(row, prototypes)?;
            let score = detection_score(&sims)?;
            Ok(ScoredSample {
                id: s.id,
                sims,
                score,
            })
        })
        .collect()
}

/// `t = μ − η·σ` with the population standard deviation, unless an explicit threshold is set.
pub fn compute_threshold(labeled_scores: &[f64], config: &DetectionConfig) -> Result<Threshold> {
    if labeled_scores.is_empty() {
        return Err(Error::invalid("compute_threshold", "no labeled scores"));
    }
    let n = labeled_scores.len() as f64;
    let mu = labeled_scores.iter().sum::<f64>() / n;
    let sigma = (labeled_scores.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / n).sqrt();
    let value = config.explicit_threshold.unwrap_or(mu - config.eta * sigma);
    Ok(Threshold {
        value,
        mu,
        sigma,
        eta: config.eta,
    })
}

/// `score < t` → out-of-class; everything else (including `score == t`) stays in.
pub fn split_unlabeled(scored: &[ScoredSample], t: f64) -> Split {
    let mut split = Split::default();
    for s in scored {
        if s.score < t {
            split.out_ids.push(s.id);
        } else {
            split.in_ids.push(s.id);
        }
    }
    split
}
