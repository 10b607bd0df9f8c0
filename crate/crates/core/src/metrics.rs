//! Classification accuracy, detection metrics and checkpoint summaries.

use serde::{Deserialize, Serialize};

use crate::bench::{feature_matrix, Origin, Sample};
use crate::error::{Error, Result};
use crate::label::argmax;
use crate::model::Model;

/// Fraction of `samples` whose eval-mode prediction matches their label.
pub fn accuracy(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("accuracy", "no samples"));
    }
    let logits = model.infer(&feature_matrix(samples)?)?.logits;
    let mut correct = 0usize;
    for (s, row) in samples.iter().zip(logits.row_iter()) {
        let label = s
            .label
            .ok_or_else(|| Error::invalid("accuracy", format!("sample {} is unlabeled", s.id)))?;
        if argmax(row) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

fn counts(origins: &[Origin]) -> Result<(usize, usize)> {
    let n_out = origins.iter().filter(|&&o| o == Origin::Out).count();
    let n_in = origins.len() - n_out;
    if n_in == 0 || n_out == 0 {
        return Err(Error::invalid(
            "detection metrics",
            "both in-class and out-of-class samples are required",
        ));
    }
    Ok((n_in, n_out))
}

/// Probability that a random in-class score exceeds a random out-of-class
/// score, ties counted half. Computed from average ranks.
pub fn auroc(scores: &[f64], origins: &[Origin]) -> Result<f64> {
    if scores.len() != origins.len() {
        return Err(Error::invalid(
            "auroc",
            "scores and origins differ in length",
        ));
    }
    let (n_in, n_out) = counts(origins)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum_in = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; a tie group shares its average rank.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if origins[k] == Origin::In {
                rank_sum_in += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_in - (n_in * (n_in + 1)) as f64 / 2.0;
    Ok(u / (n_in as f64 * n_out as f64))
}

/// Thresholded detection rates. Out-of-class is the positive class: a sample
/// is flagged out when `score < t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRates {
    /// Out-of-class samples flagged out.
    pub tpr: f64,
    /// In-class samples kept in.
    pub tnr: f64,
}

impl DetectionRates {
    /// The same numbers under the in-class-positive convention.
    pub fn in_positive(&self) -> DetectionRates {
        DetectionRates {
            tpr: self.tnr,
            tnr: self.tpr,
        }
    }
}

pub fn tpr_tnr(scores: &[f64], origins: &[Origin], t: f64) -> Result<DetectionRates> {
    if scores.len() != origins.len() {
        return Err(Error::invalid(
            "tpr_tnr",
            "scores and origins differ in length",
        ));
    }
    let (n_in, n_out) = counts(origins)?;
    let mut tp = 0usize;
    let mut tn = 0usize;
    for (&s, &o) in scores.iter().zip(origins) {
        match o {
            Origin::Out if s < t => tp += 1,
            Origin::In if s >= t => tn += 1,
            _ => {}
        }
    }
    Ok(DetectionRates {
        tpr: tp as f64 / n_out as f64,
        tnr: tn as f64 / n_in as f64,
    })
}

/// Median of the final `n` values; mean of the middle two for even `n`.
pub fn median_last_n(values: &[f64], n: usize) -> Result<f64> {
    if n == 0 || values.len() < n {
        return Err(Error::invalid(
            "median_last_n",
            format!("need {n} values, have {}", values.len()),
        ));
    }
    let mut tail = values[values.len() - n..].to_vec();
    tail.sort_by(f64::total_cmp);
    Ok(if n % 2 == 1 {
        tail[n / 2]
    } else {
        (tail[n / 2 - 1] + tail[n / 2]) / 2.0
    })
}
