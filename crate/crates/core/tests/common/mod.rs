//! Brute-force oracles shared by the oracle and acceptance test targets.
#![allow(dead_code)]

use opencos::augment::{augment_keyed, AugmentConfig};
use opencos::autodiff::{Graph, NodeId};
use opencos::bench::{generate, BenchmarkSpec, Sample};
use opencos::contrastive::{simclr_batch_loss, ContrastiveConfig};
use opencos::detect::{
    compute_prototypes, compute_threshold, prototypes_from_projections, score_samples,
    similarities_of, split_unlabeled, DetectionConfig,
};
use opencos::gradcheck::grad_check;
use opencos::label::{oversample, select_topk_from_probs, soft_label};
use opencos::model::{BoundParams, Model, ModelConfig};
use opencos::rng::{keyed_rng, stream};
use opencos::ssl::{
    consistency_target, opencos_loss, Backend, ConsistencyInputs, OutInputs, SslConfig, StepBatch,
};
use opencos::tensor::Array;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn normal_array(seed: u64, key: u64, shape: &[usize]) -> Array {
    let mut rng = keyed_rng(seed, &[999, key]);
    let n = shape.iter().product();
    Array::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .unwrap()
}

fn positive_array(seed: u64, key: u64, shape: &[usize]) -> Array {
    normal_array(seed, key, shape).map(|v| 0.5 + v.abs())
}

/// `Σ w ⊙ node` with fixed weights, so every output coordinate matters.
fn weighted_sum(g: &mut Graph, node: NodeId, seed: u64) -> opencos::Result<NodeId> {
    let shape = g.value(node).shape().to_vec();
    let w = g.input(normal_array(seed, 77, &shape));
    let p = g.mul(node, w)?;
    g.sum(p)
}

type OpCase = (
    &'static str,
    Vec<usize>,
    bool,
    fn(&mut Graph, NodeId, u64) -> opencos::Result<NodeId>,
);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![3, 4], false, |g, x, s| {
            let b = g.input(normal_array(s, 1, &[4, 2]));
            let y = g.matmul(x, b)?;
            weighted_sum(g, y, s)
        }),
        ("add", vec![3, 4], false, |g, x, s| {
            let b = g.input(normal_array(s, 2, &[1, 4]));
            let y = g.add(x, b)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, s)
        }),
        ("add-row-broadcast-grad", vec![1, 4], false, |g, x, s| {
            let a = g.input(normal_array(s, 3, &[3, 4]));
            let y = g.add(a, x)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, s)
        }),
        ("add-scalar-broadcast-grad", vec![], false, |g, x, s| {
            let a = g.input(normal_array(s, 4, &[3, 4]));
            let y = g.add(a, x)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, s)
        }),
        ("elementwise-mul", vec![3, 4], false, |g, x, s| {
            let b = g.input(normal_array(s, 5, &[3, 4]));
            let y = g.mul(x, b)?;
            let y = g.mul(y, x)?;
            weighted_sum(g, y, s)
        }),
        ("scale", vec![3, 4], false, |g, x, s| {
            let y = g.scale(x, -1.7)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, s)
        }),
        ("relu", vec![3, 4], false, |g, x, s| {
            let y = g.relu(x)?;
            weighted_sum(g, y, s)
        }),
        ("mean", vec![3, 4], false, |g, x, _| {
            let y = g.mul(x, x)?;
            g.mean(y)
        }),
        ("sum", vec![3, 4], false, |g, x, _| {
            let y = g.mul(x, x)?;
            g.sum(y)
        }),
        ("exp", vec![3, 4], false, |g, x, s| {
            let y = g.exp(x)?;
            weighted_sum(g, y, s)
        }),
        ("log", vec![3, 4], true, |g, x, s| {
            let y = g.log(x)?;
            weighted_sum(g, y, s)
        }),
        ("softmax-rows", vec![3, 4], false, |g, x, s| {
            let y = g.softmax_rows(x)?;
            weighted_sum(g, y, s)
        }),
        ("log-softmax-rows", vec![3, 4], false, |g, x, s| {
            let y = g.log_softmax_rows(x)?;
            weighted_sum(g, y, s)
        }),
        ("l2-normalize-rows", vec![3, 4], false, |g, x, s| {
            let y = g.l2_normalize_rows(x)?;
            weighted_sum(g, y, s)
        }),
        ("concat-rows", vec![2, 4], false, |g, x, s| {
            let b = g.input(normal_array(s, 6, &[3, 4]));
            let y = g.concat_rows(&[b, x, x])?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, s)
        }),
        ("slice-rows", vec![5, 3], false, |g, x, s| {
            let y = g.slice_rows(x, 1, 4)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, s)
        }),
        ("transpose", vec![3, 4], false, |g, x, s| {
            let y = g.transpose(x)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, s)
        }),
        ("gather", vec![3, 4], false, |g, x, s| {
            let y = g.gather(x, vec![0, 5, 5, 11, 2, 7], vec![2, 3])?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, s)
        }),
        ("batch-norm", vec![6, 3], false, |g, x, s| {
            let y = g.batch_norm(x, 1e-5)?;
            weighted_sum(g, y, s)
        }),
        ("soft-cross-entropy", vec![4, 3], false, |g, x, s| {
            let t = opencos::autodiff::softmax_rows(&normal_array(s, 8, &[4, 3]));
            g.soft_cross_entropy(x, &t)
        }),
    ]
}

/// Worst relative gradient error per operation kind over ten seeded points.
pub fn op_grad_errors() -> Vec<(&'static str, f64)> {
    op_cases()
        .into_iter()
        .map(|(name, shape, positive, f)| {
            let worst = (0..10u64)
                .map(|seed| {
                    let point = if positive {
                        positive_array(seed, 100, &shape)
                    } else {
                        normal_array(seed, 100, &shape)
                    };
                    grad_check(|g, x| f(g, x, seed), &point, 1e-6).unwrap()
                })
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        input_dim: 8,
        hidden_dims: vec![6],
        embed_dim: 5,
        proj_dim: 4,
        num_classes: 2,
        ..ModelConfig::default()
    }
}

/// Gradient check of the full combined loss with respect to every model
/// parameter at once, through a flat parameter vector.
pub fn opencos_loss_grad_error(seed: u64) -> f64 {
    let model = Model::new(toy_model_config(), seed).unwrap();
    let shapes: Vec<Vec<usize>> = model
        .params()
        .iter()
        .map(|p| p.value.shape().to_vec())
        .collect();
    let flat: Vec<f64> = model
        .params()
        .iter()
        .flat_map(|p| p.value.data().to_vec())
        .collect();
    let point = Array::new(vec![flat.len()], flat).unwrap();

    let lx = normal_array(seed, 10, &[4, 8]);
    let ly = Array::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let weak = normal_array(seed, 11, &[4, 8]);
    let target = consistency_target(&model, &weak, Backend::Consistency).unwrap();
    let batch = StepBatch {
        labeled_x: lx,
        labeled_y: ly,
        unlabeled: Some(ConsistencyInputs {
            target,
            view: normal_array(seed, 12, &[4, 8]),
        }),
        out: Some(OutInputs {
            x: normal_array(seed, 13, &[4, 8]),
            q: opencos::autodiff::softmax_rows(&normal_array(seed, 14, &[4, 2])),
        }),
    };
    let config = SslConfig::default();
    let mut scratch = model.clone();
    grad_check(
        |g, x| {
            let mut ids = Vec::with_capacity(shapes.len());
            let mut offset = 0;
            for shape in &shapes {
                let n: usize = shape.iter().product();
                ids.push(g.gather(x, (offset..offset + n).collect(), shape.clone())?);
                offset += n;
            }
            let bound = BoundParams::from_ids(ids);
            Ok(opencos_loss(&mut scratch, g, &bound, &batch, &config)?.total)
        },
        &point,
        1e-6,
    )
    .unwrap()
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv)
}

/// NT-Xent from first principles: for each of the `2N` views, the positive's
/// share of `exp(cos/τ)` over all other views, averaged as `−log`.
pub fn brute_ntxent(proj: &[Vec<f64>], tau: f64) -> f64 {
    let m = proj.len();
    let n = m / 2;
    let mut total = 0.0;
    for i in 0..m {
        let pos = (i + n) % m;
        let num = (cosine(&proj[i], &proj[pos]) / tau).exp();
        let den: f64 = (0..m)
            .filter(|&k| k != i)
            .map(|k| (cosine(&proj[i], &proj[k]) / tau).exp())
            .sum();
        total += -(num / den).ln();
    }
    total / m as f64
}

fn simclr_samples(n: usize, seed: u64, identical: bool) -> Vec<Sample> {
    (0..n)
        .map(|i| Sample {
            id: i as u64,
            features: normal_array(seed, if identical { 50 } else { 50 + i as u64 }, &[16])
                .into_data(),
            label: None,
        })
        .collect()
}

/// Library loss and the brute-force value on the same projections, plus the
/// gap between the library projections and an independent forward pass.
pub fn simclr_vs_brute(n: usize, seed: u64, identical: bool) -> (f64, f64, f64) {
    let mut model = Model::new(ModelConfig::default(), seed).unwrap();
    let mut config = ContrastiveConfig::default();
    if identical {
        config.augment = AugmentConfig::identity();
    }
    let samples = simclr_samples(n, seed, identical);
    let refs: Vec<&Sample> = samples.iter().collect();
    let reference = model.clone();
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let nodes = simclr_batch_loss(&mut model, &mut g, &bound, &refs, &config, seed, 3).unwrap();
    let lib = g.value(nodes.loss).item();

    let mut views = Vec::new();
    for view in 0..2u64 {
        for s in &samples {
            views.push(augment_keyed(
                &s.features,
                &config.augment,
                seed,
                &[stream::PRETRAIN_AUGMENT, 3, s.id, view],
            ));
        }
    }
    let proj = reference
        .forward_batch_stats(&Array::from_rows(&views).unwrap())
        .unwrap()
        .projection;
    let proj_gap = proj
        .data()
        .iter()
        .zip(g.value(nodes.projections).data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let rows: Vec<Vec<f64>> = proj.row_iter().map(|r| r.to_vec()).collect();
    let brute = if n == 1 {
        0.0
    } else {
        brute_ntxent(&rows, config.tau_con)
    };
    (lib, brute, proj_gap)
}

pub struct DetectionCheck {
    pub max_error: f64,
    pub split_matches: bool,
    pub exact_partition: bool,
    pub scaling_invariant: bool,
    pub out_count: usize,
}

/// Runs the library detection path on a seeded 1000-sample pool and compares
/// every intermediate with brute-force recomputation.
pub fn detection_check(seed: u64) -> DetectionCheck {
    let spec = BenchmarkSpec {
        total_unlabeled: 1000,
        seed,
        ..BenchmarkSpec::default()
    };
    let bench = generate(&spec).unwrap();
    let model = Model::new(ModelConfig::default(), seed).unwrap();
    let config = DetectionConfig::default();

    let protos = compute_prototypes(&bench.labeled, &model).unwrap();
    let scored = score_samples(&bench.unlabeled, &protos, &model).unwrap();
    let labeled_scores: Vec<f64> = score_samples(&bench.labeled, &protos, &model)
        .unwrap()
        .iter()
        .map(|s| s.score)
        .collect();
    let threshold = compute_threshold(&labeled_scores, &config).unwrap();
    let split = split_unlabeled(&scored, threshold.value);

    let c = spec.in_classes;
    let project = |samples: &[Sample]| -> Vec<Vec<f64>> {
        samples
            .iter()
            .map(|s| {
                let x = Array::new(vec![1, s.features.len()], s.features.clone()).unwrap();
                model.infer(&x).unwrap().projection.into_data()
            })
            .collect()
    };
    let lp = project(&bench.labeled);
    let d = lp[0].len();
    let mut oracle_protos = vec![vec![0.0; d]; c];
    let mut counts = vec![0usize; c];
    for (p, s) in lp.iter().zip(&bench.labeled) {
        let l = s.label.unwrap();
        counts[l] += 1;
        for k in 0..d {
            oracle_protos[l][k] += p[k];
        }
    }
    for (proto, &n) in oracle_protos.iter_mut().zip(&counts) {
        proto.iter_mut().for_each(|v| *v /= n as f64);
    }
    let oracle_score = |p: &[f64]| -> (Vec<f64>, f64) {
        let sims: Vec<f64> = oracle_protos.iter().map(|q| cosine(p, q)).collect();
        let score = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (sims, score)
    };
    let oracle_labeled: Vec<f64> = lp.iter().map(|p| oracle_score(p).1).collect();
    let mu = oracle_labeled.iter().sum::<f64>() / oracle_labeled.len() as f64;
    let var = oracle_labeled
        .iter()
        .map(|s| (s - mu) * (s - mu))
        .sum::<f64>()
        / oracle_labeled.len() as f64;
    let t = mu - 2.0 * var.sqrt();

    let mut err: f64 = 0.0;
    for (a, b) in protos
        .prototypes
        .iter()
        .flatten()
        .zip(oracle_protos.iter().flatten())
    {
        err = err.max((a - b).abs());
    }
    let up = project(&bench.unlabeled);
    let mut oracle_out = Vec::new();
    let mut oracle_in = Vec::new();
    for ((p, s), lib) in up.iter().zip(&bench.unlabeled).zip(&scored) {
        let (sims, score) = oracle_score(p);
        for (a, b) in sims.iter().zip(&lib.sims) {
            err = err.max((a - b).abs());
        }
        err = err.max((score - lib.score).abs());
        if score < t {
            oracle_out.push(s.id);
        } else {
            oracle_in.push(s.id);
        }
    }
    err = err.max((t - threshold.value).abs());

    let mut all: Vec<u64> = split.in_ids.iter().chain(&split.out_ids).copied().collect();
    all.sort_unstable();
    let mut pool: Vec<u64> = bench.unlabeled.iter().map(|s| s.id).collect();
    pool.sort_unstable();

    // Scaling every projection by a positive constant leaves cosines unchanged.
    let scale = 37.5;
    let scaled = |rows: &[Vec<f64>]| {
        Array::from_rows(
            &rows
                .iter()
                .map(|r| r.iter().map(|v| v * scale).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        )
        .unwrap()
    };
    let labels: Vec<usize> = bench.labeled.iter().map(|s| s.label.unwrap()).collect();
    let sp = prototypes_from_projections(&scaled(&lp), &labels, c).unwrap();
    let score_of = |row: &[f64]| {
        similarities_of(row, &sp)
            .unwrap()
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let sl = scaled(&lp);
    let scaled_labeled: Vec<f64> = sl.row_iter().map(score_of).collect();
    let st = compute_threshold(&scaled_labeled, &config).unwrap().value;
    let su = scaled(&up);
    let scaled_out: Vec<u64> = su
        .row_iter()
        .zip(&bench.unlabeled)
        .filter(|(r, _)| score_of(r) < st)
        .map(|(_, s)| s.id)
        .collect();

    DetectionCheck {
        max_error: err,
        split_matches: split.out_ids == oracle_out && split.in_ids == oracle_in,
        exact_partition: all == pool && all.windows(2).all(|w| w[0] != w[1]),
        scaling_invariant: scaled_out == split.out_ids,
        out_count: split.out_ids.len(),
    }
}

pub struct LabelingCheck {
    pub max_sum_error: f64,
    pub argmax_matches: bool,
    pub topk_matches: bool,
    pub oversample_equal: bool,
}

/// Soft-labels, top-k selection and oversampling against direct oracles.
pub fn labeling_check(seed: u64) -> LabelingCheck {
    let mut rng = keyed_rng(seed, &[4242]);
    let mut max_sum_error: f64 = 0.0;
    let mut argmax_matches = true;
    for _ in 0..200 {
        let c = rng.random_range(2..12);
        let sims: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tau = rng.random_range(0.01..2.0);
        let q = soft_label(&sims, tau).q;
        max_sum_error = max_sum_error.max((q.iter().sum::<f64>() - 1.0).abs());
        let first_max = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
        argmax_matches &= first_max(&q) == first_max(&sims);
    }

    let mut topk_matches = true;
    for trial in 0..50 {
        let n = rng.random_range(1..60);
        let c = 4;
        // Coarse values make ties in confidence common.
        let logits: Vec<f64> = (0..n * c)
            .map(|_| (rng.random_range(0..6) as f64) * 0.5)
            .collect();
        let probs = opencos::autodiff::softmax_rows(&Array::new(vec![n, c], logits).unwrap());
        let ids: Vec<u64> = (0..n as u64).map(|i| (i * 7919 + trial) % 1000).collect();
        let k = rng.random_range(0.01..1.0);
        let got = select_topk_from_probs(&ids, &probs, k).entries;

        let mut oracle: Vec<(u64, usize, f64)> = ids
            .iter()
            .zip(probs.row_iter())
            .map(|(&id, row)| {
                let mut best = 0;
                for j in 1..row.len() {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                (id, best, row[best])
            })
            .collect();
        oracle.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
        let want = ((k * n as f64) - 1e-9).ceil().max(1.0) as usize;
        oracle.truncate(want.min(n));
        topk_matches &= got.len() == oracle.len()
            && got
                .iter()
                .zip(&oracle)
                .all(|(p, o)| p.id == o.0 && p.class == o.1 && p.confidence == o.2);
    }

    let mut oversample_equal = true;
    for _ in 0..20 {
        let classes = rng.random_range(2..6);
        let samples: Vec<Sample> = (0..rng.random_range(classes..40))
            .map(|i| Sample {
                id: i as u64,
                features: vec![0.0],
                label: Some(if i < classes {
                    i
                } else {
                    rng.random_range(0..classes)
                }),
            })
            .collect();
        let out = oversample(&samples).unwrap();
        let count = |l: usize, s: &[Sample]| s.iter().filter(|x| x.label == Some(l)).count();
        let largest = (0..classes).map(|l| count(l, &samples)).max().unwrap();
        oversample_equal &= (0..classes).all(|l| count(l, &out) == largest);
    }

    LabelingCheck {
        max_sum_error,
        argmax_matches,
        topk_matches,
        oversample_equal,
    }
}

/// AUROC as the fraction of (in, out) pairs ordered correctly, ties half.
pub fn pairwise_auroc(scores: &[f64], is_in: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &a) in scores.iter().enumerate() {
        for (j, &b) in scores.iter().enumerate() {
            if is_in[i] && !is_in[j] {
                pairs += 1.0;
                wins += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}
