//! End-to-end runs: pretrain, detect, label, train, report. Also the sweep
//! driver and metric recomputation from the files a run leaves behind.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bench::{generate, Benchmark, BenchmarkSpec, Origin, Sample};
use crate::checkpoint;
use crate::contrastive::{pretrain, ContrastiveConfig};
use crate::dataset_io::fmt_real;
use crate::detect::{
    compute_prototypes, compute_threshold, score_samples, split_unlabeled, DetectionConfig,
    ScoredSample, Threshold,
};
use crate::error::{Error, Result};
use crate::label::{
    oversample, select_topk, soft_label, train_linear_eval, LabelingConfig, PseudoLabel, SoftLabel,
};
use crate::manifest::{self, ScoreRow, SplitTag};
use crate::metrics::{auroc, median_last_n, tpr_tnr, DetectionRates};
use crate::model::{Model, ModelConfig};
use crate::ssl::{train, Checkpoint, SslConfig, TrainData, TrainState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkSpec,
    /// Load a saved benchmark from this directory instead of generating one.
    pub dataset_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub contrastive: ContrastiveConfig,
    pub detection: DetectionConfig,
    pub labeling: LabelingConfig,
    pub ssl: SslConfig,
    /// Reported accuracy is the median over this many final checkpoints.
    pub median_last: usize,
    pub seed: u64,
    /// Where manifests, checkpoints and the report go; nothing is written when unset.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            benchmark: BenchmarkSpec::default(),
            dataset_dir: None,
            model: ModelConfig::default(),
            contrastive: ContrastiveConfig::default(),
            detection: DetectionConfig::default(),
            labeling: LabelingConfig::default(),
            ssl: SslConfig::default(),
            median_last: 5,
            seed: 0,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Sets the master seed and the benchmark seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.benchmark.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.contrastive.validate()?;
        self.labeling.validate()?;
        self.ssl.validate()?;
        if self.dataset_dir.is_none() {
            self.benchmark.validate()?;
        }
        if self.median_last == 0 {
            return Err(Error::config("median_last must be positive"));
        }
        if self.ssl.steps > 0 {
            let checkpoints = match self.ssl.checkpoint_interval {
                0 => 0,
                i => self.ssl.steps * self.ssl.batch_size / i,
            };
            if checkpoints < self.median_last {
                return Err(Error::config(format!(
                    "training yields {checkpoints} checkpoints, fewer than median_last = {}",
                    self.median_last
                )));
            }
        }
        Ok(())
    }

    fn check_data(&self, bench: &Benchmark) -> Result<()> {
        if bench.spec.dim != self.model.input_dim || bench.spec.in_classes != self.model.num_classes
        {
            return Err(Error::config(format!(
                "model expects {} inputs and {} classes, data has {} and {}",
                self.model.input_dim, self.model.num_classes, bench.spec.dim, bench.spec.in_classes
            )));
        }
        Ok(())
    }

    fn pretrain_key(&self) -> PretrainKey {
        PretrainKey {
            benchmark: self.dataset_dir.is_none().then(|| self.benchmark.clone()),
            dataset_dir: self.dataset_dir.clone(),
            model: self.model.clone(),
            contrastive: self.contrastive.clone(),
            seed: self.seed,
        }
    }
}

pub fn load_benchmark(config: &ExperimentConfig) -> Result<Benchmark> {
    let bench = match &config.dataset_dir {
        Some(dir) => Benchmark::load(dir)?,
        None => generate(&config.benchmark)?,
    };
    config.check_data(&bench)?;
    Ok(bench)
}

/// Everything pretraining depends on; equal keys give identical models.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainKey {
    benchmark: Option<BenchmarkSpec>,
    dataset_dir: Option<PathBuf>,
    model: ModelConfig,
    contrastive: ContrastiveConfig,
    seed: u64,
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub key: PretrainKey,
    pub model: Model,
    pub trace: Vec<(usize, f64)>,
    pub seconds: f64,
}

/// Pretrained models kept across runs that share their pretraining inputs.
#[derive(Debug, Default)]
pub struct PretrainCache {
    entries: Vec<Pretrained>,
}

impl PretrainCache {
    pub fn get(&self, key: &PretrainKey) -> Option<&Pretrained> {
        self.entries.iter().find(|p| &p.key == key)
    }

    pub fn insert(&mut self, p: Pretrained) {
        if self.get(&p.key).is_none() {
            self.entries.push(p);
        }
    }
}

/// Contrastive pretraining on labeled and unlabeled features together.
pub fn stage_pretrain(config: &ExperimentConfig, bench: &Benchmark) -> Result<Pretrained> {
    let start = Instant::now();
    let model = Model::new(config.model.clone(), config.seed)?;
    let pool: Vec<Sample> = bench
        .labeled
        .iter()
        .chain(&bench.unlabeled)
        .cloned()
        .collect();
    let out = pretrain(model, &pool, &config.contrastive, config.seed)?;
    Ok(Pretrained {
        key: config.pretrain_key(),
        model: out.model,
        trace: out.trace,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug)]
pub struct DetectionOutcome {
    pub labeled_scores: Vec<ScoredSample>,
    pub unlabeled_scores: Vec<ScoredSample>,
    pub threshold: Threshold,
    /// Tags per unlabeled sample, in `unlabeled_scores` order.
    pub tags: Vec<SplitTag>,
}

impl DetectionOutcome {
    pub fn score_rows(&self) -> Vec<ScoreRow> {
        let row = |s: &ScoredSample, split| ScoreRow {
            id: s.id,
            sims: s.sims.clone(),
            score: s.score,
            split,
        };
        self.labeled_scores
            .iter()
            .map(|s| row(s, SplitTag::Labeled))
            .chain(
                self.unlabeled_scores
                    .iter()
                    .zip(&self.tags)
                    .map(|(s, &t)| row(s, t)),
            )
            .collect()
    }

    /// Rebuilds an outcome from a score manifest.
    pub fn from_rows(rows: &[ScoreRow], config: &DetectionConfig) -> Result<Self> {
        let scored = |r: &ScoreRow| ScoredSample {
            id: r.id,
            sims: r.sims.clone(),
            score: r.score,
        };
        let labeled_scores: Vec<ScoredSample> = rows
            .iter()
            .filter(|r| r.split == SplitTag::Labeled)
            .map(scored)
            .collect();
        let unlabeled: Vec<&ScoreRow> = rows
            .iter()
            .filter(|r| r.split != SplitTag::Labeled)
            .collect();
        let scores: Vec<f64> = labeled_scores.iter().map(|s| s.score).collect();
        Ok(DetectionOutcome {
            threshold: compute_threshold(&scores, config)?,
            unlabeled_scores: unlabeled.iter().map(|r| scored(r)).collect(),
            tags: unlabeled.iter().map(|r| r.split).collect(),
            labeled_scores,
        })
    }
}

/// Prototypes from the labeled set, scores for labeled and unlabeled samples,
/// the threshold and the in/out split.
pub fn stage_detect(
    config: &ExperimentConfig,
    bench: &Benchmark,
    model: &Model,
) -> Result<DetectionOutcome> {
    let prototypes = compute_prototypes(&bench.labeled, model)?;
    let labeled_scores = score_samples(&bench.labeled, &prototypes, model)?;
    let unlabeled_scores = score_samples(&bench.unlabeled, &prototypes, model)?;
    let scores: Vec<f64> = labeled_scores.iter().map(|s| s.score).collect();
    let threshold = compute_threshold(&scores, &config.detection)?;
    let split = split_unlabeled(&unlabeled_scores, threshold.value);
    let out: HashSet<u64> = split.out_ids.into_iter().collect();
    let tags = unlabeled_scores
        .iter()
        .map(|s| {
            if out.contains(&s.id) {
                SplitTag::Out
            } else {
                SplitTag::In
            }
        })
        .collect();
    Ok(DetectionOutcome {
        labeled_scores,
        unlabeled_scores,
        threshold,
        tags,
    })
}

#[derive(Clone, Debug)]
pub struct LabelOutcome {
    pub soft_labels: Vec<(u64, SoftLabel)>,
    pub pseudo_labels: Vec<PseudoLabel>,
    pub data: TrainData,
}

/// Soft-labels the detected out-of-class samples and pseudo-labels the most
/// confident detected in-class samples, as the toggles allow.
pub fn stage_label(
    config: &ExperimentConfig,
    bench: &Benchmark,
    model: &Model,
    detection: &DetectionOutcome,
) -> Result<LabelOutcome> {
    let toggles = config.ssl.toggles;
    let mut soft_labels = Vec::new();
    if toggles.detect && toggles.aux_loss {
        for (s, &tag) in detection.unlabeled_scores.iter().zip(&detection.tags) {
            if tag == SplitTag::Out {
                soft_labels.push((s.id, soft_label(&s.sims, config.labeling.tau_sl)));
            }
        }
    }
    let mut pseudo_labels = Vec::new();
    if toggles.topk_pl {
        let in_class = in_class_samples(config, bench, detection)?;
        if !in_class.is_empty() {
            let head = train_linear_eval(model, &bench.labeled, &config.labeling, config.seed)?;
            pseudo_labels =
                select_topk(&in_class, &head, model, config.labeling.k_fraction)?.entries;
        }
    }
    let data = assemble_train_data(config, bench, detection, &soft_labels, &pseudo_labels)?;
    Ok(LabelOutcome {
        soft_labels,
        pseudo_labels,
        data,
    })
}

fn unlabeled_lookup<'a>(bench: &'a Benchmark) -> impl Fn(u64) -> Result<&'a Sample> + 'a {
    let by_id: HashMap<u64, &Sample> = bench.unlabeled.iter().map(|s| (s.id, s)).collect();
    move |id| {
        by_id.get(&id).copied().ok_or_else(|| {
            Error::invalid("label", format!("sample {id} is not in the unlabeled pool"))
        })
    }
}

/// The unlabeled samples used as in-class: the detected ones, or the whole
/// pool when detection is off.
fn in_class_samples(
    config: &ExperimentConfig,
    bench: &Benchmark,
    detection: &DetectionOutcome,
) -> Result<Vec<Sample>> {
    let lookup = unlabeled_lookup(bench);
    detection
        .unlabeled_scores
        .iter()
        .zip(&detection.tags)
        .filter(|(_, &tag)| !config.ssl.toggles.detect || tag != SplitTag::Out)
        .map(|(s, _)| lookup(s.id).cloned())
        .collect()
}

/// Builds the training streams from labeling results: labeled plus
/// pseudo-labeled samples (oversampled), in-class samples, and out-of-class
/// samples paired with their soft-labels.
pub fn assemble_train_data(
    config: &ExperimentConfig,
    bench: &Benchmark,
    detection: &DetectionOutcome,
    soft_labels: &[(u64, SoftLabel)],
    pseudo_labels: &[PseudoLabel],
) -> Result<TrainData> {
    let lookup = unlabeled_lookup(bench);
    let out_class = soft_labels
        .iter()
        .map(|(id, q)| Ok((lookup(*id)?.clone(), q.clone())))
        .collect::<Result<Vec<_>>>()?;
    let mut labeled = bench.labeled.clone();
    for p in pseudo_labels {
        let mut s = lookup(p.id)?.clone();
        s.label = Some(p.class);
        labeled.push(s);
    }
    Ok(TrainData {
        labeled: oversample(&labeled)?,
        in_class: in_class_samples(config, bench, detection)?,
        out_class,
    })
}

/// Fine-tunes `model`, writing a checkpoint file per interval when `dir` is set.
pub fn stage_train(
    config: &ExperimentConfig,
    bench: &Benchmark,
    model: Model,
    data: &TrainData,
    dir: Option<&Path>,
) -> Result<TrainState> {
    let state = TrainState::new(model, config.ssl.sgd.clone());
    if let Some(d) = dir {
        fs::create_dir_all(d.join("checkpoints"))?;
    }
    train(
        state,
        data,
        &bench.test,
        &config.ssl,
        config.seed,
        |s, c: &Checkpoint| match dir {
            Some(d) => checkpoint::save(
                &s.model,
                &d.join("checkpoints")
                    .join(format!("step_{:06}.ckpt", c.step)),
            ),
            None => Ok(()),
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub threshold: Threshold,
    /// `None` when the unlabeled pool lacks in-class or out-of-class samples.
    pub auroc: Option<f64>,
    /// Out-of-class treated as positive.
    pub out_positive: Option<DetectionRates>,
    /// In-class treated as positive.
    pub in_positive: Option<DetectionRates>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub in_class: usize,
    pub out_class: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSummary {
    pub count: usize,
    /// Agreement with the hidden truth; `None` without pseudo-labels.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub checkpoint_accuracies: Vec<f64>,
    pub median_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
    pub detection: DetectionMetrics,
    pub split: SplitSizes,
    pub pseudo_labels: PseudoLabelSummary,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub pretrain_seconds: f64,
    pub pretrain_reused: bool,
    pub detect_seconds: f64,
    pub label_seconds: f64,
    pub train_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metrics: Metrics,
    pub config: ExperimentConfig,
    pub timings: Timings,
}

impl Report {
    /// JSON with timings zeroed, so equal runs give equal bytes.
    pub fn canonical_json(&self) -> Result<String> {
        let r = Report {
            timings: Timings::default(),
            ..self.clone()
        };
        Ok(serde_json::to_string_pretty(&r)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Metrics of a finished run from its detection, labeling and checkpoint results.
pub fn compute_metrics(
    config: &ExperimentConfig,
    bench: &Benchmark,
    detection: &DetectionOutcome,
    pseudo: &[PseudoLabel],
    accuracies: Vec<f64>,
) -> Result<Metrics> {
    let scores: Vec<f64> = detection.unlabeled_scores.iter().map(|s| s.score).collect();
    let origins = detection
        .unlabeled_scores
        .iter()
        .map(|s| {
            bench.truth.get(s.id).map(|t| t.origin).ok_or_else(|| {
                Error::invalid("metrics", format!("sample {} has no truth entry", s.id))
            })
        })
        .collect::<Result<Vec<Origin>>>()?;
    let both = origins.contains(&Origin::In) && origins.contains(&Origin::Out);
    let rates = if both {
        Some(tpr_tnr(&scores, &origins, detection.threshold.value)?)
    } else {
        None
    };
    let out_class = if config.ssl.toggles.detect {
        detection
            .tags
            .iter()
            .filter(|&&t| t == SplitTag::Out)
            .count()
    } else {
        0
    };
    let pseudo_accuracy = if pseudo.is_empty() {
        None
    } else {
        let correct = pseudo
            .iter()
            .filter(|p| bench.truth.get(p.id).is_some_and(|t| t.class == p.class))
            .count();
        Some(correct as f64 / pseudo.len() as f64)
    };
    let median_accuracy = if accuracies.len() >= config.median_last {
        Some(median_last_n(&accuracies, config.median_last)?)
    } else {
        None
    };
    Ok(Metrics {
        median_accuracy,
        best_accuracy: accuracies.iter().copied().reduce(f64::max),
        checkpoint_accuracies: accuracies,
        detection: DetectionMetrics {
            threshold: detection.threshold,
            auroc: if both {
                Some(auroc(&scores, &origins)?)
            } else {
                None
            },
            out_positive: rates,
            in_positive: rates.map(|r| r.in_positive()),
        },
        split: SplitSizes {
            in_class: scores.len() - out_class,
            out_class,
        },
        pseudo_labels: PseudoLabelSummary {
            count: pseudo.len(),
            accuracy: pseudo_accuracy,
        },
    })
}

/// Runs the full pipeline.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Report> {
    run_experiment_cached(config, &mut PretrainCache::default())
}

/// Like [`run_experiment`], reusing a cached pretrained model when one matches.
pub fn run_experiment_cached(
    config: &ExperimentConfig,
    cache: &mut PretrainCache,
) -> Result<Report> {
    let start = Instant::now();
    config.validate().map_err(|e| e.in_stage("config"))?;
    let bench = load_benchmark(config).map_err(|e| e.in_stage("data"))?;
    let dir = config.output_dir.as_deref();
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
        bench
            .save(&d.join("benchmark"))
            .map_err(|e| e.in_stage("data"))?;
    }

    let key = config.pretrain_key();
    let reused = cache.get(&key).is_some();
    if !reused {
        cache.insert(stage_pretrain(config, &bench).map_err(|e| e.in_stage("pretrain"))?);
    }
    let pre = cache.get(&key).expect("cached pretrained model");
    if let Some(d) = dir {
        manifest::write_pretrain_trace(&d.join("pretrain_trace.csv"), &pre.trace)?;
        checkpoint::save(&pre.model, &d.join("pretrained.ckpt"))?;
    }
    let model = pre.model.clone();
    let mut timings = Timings {
        pretrain_seconds: pre.seconds,
        pretrain_reused: reused,
        ..Timings::default()
    };

    let t = Instant::now();
    let detection = stage_detect(config, &bench, &model).map_err(|e| e.in_stage("detect"))?;
    timings.detect_seconds = t.elapsed().as_secs_f64();
    if let Some(d) = dir {
        manifest::write_scores(&d.join("scores.csv"), &detection.score_rows())?;
    }

    let t = Instant::now();
    let labels =
        stage_label(config, &bench, &model, &detection).map_err(|e| e.in_stage("label"))?;
    timings.label_seconds = t.elapsed().as_secs_f64();
    if let Some(d) = dir {
        manifest::write_soft_labels(&d.join("soft_labels.csv"), &labels.soft_labels)?;
        manifest::write_pseudo_labels(&d.join("pseudo_labels.csv"), &labels.pseudo_labels)?;
    }

    let t = Instant::now();
    let state =
        stage_train(config, &bench, model, &labels.data, dir).map_err(|e| e.in_stage("train"))?;
    timings.train_seconds = t.elapsed().as_secs_f64();
    if let Some(d) = dir {
        manifest::write_train_trace(&d.join("train_trace.csv"), &state.trace)?;
        checkpoint::save(&state.model, &d.join("final.ckpt"))?;
    }

    let metrics = compute_metrics(
        config,
        &bench,
        &detection,
        &labels.pseudo_labels,
        state.accuracies(),
    )
    .map_err(|e| e.in_stage("report"))?;
    timings.total_seconds = start.elapsed().as_secs_f64();
    let report = Report {
        metrics,
        config: config.clone(),
        timings,
    };
    if let Some(d) = dir {
        report.save(&d.join("report.json"))?;
    }
    Ok(report)
}

/// Recomputes a run's metrics from the files in its output directory.
pub fn evaluate_dir(dir: &Path) -> Result<Metrics> {
    let report = Report::load(&dir.join("report.json"))?;
    let config = &report.config;
    let bench = Benchmark::load(&dir.join("benchmark"))?;
    let detection = DetectionOutcome::from_rows(
        &manifest::read_scores(&dir.join("scores.csv"))?,
        &config.detection,
    )?;
    let pseudo = manifest::read_pseudo_labels(&dir.join("pseudo_labels.csv"))?;
    let accuracies = manifest::read_train_trace(&dir.join("train_trace.csv"))?
        .iter()
        .filter_map(|r| r.test_accuracy)
        .collect();
    compute_metrics(config, &bench, &detection, &pseudo, accuracies)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Proportion,
    TauSl,
    Lambda,
    KFraction,
    Eta,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Proportion => "proportion",
            SweepAxis::TauSl => "tau_sl",
            SweepAxis::Lambda => "lambda",
            SweepAxis::KFraction => "k_fraction",
            SweepAxis::Eta => "eta",
        }
    }

    pub fn apply(self, config: &mut ExperimentConfig, value: f64) -> Result<()> {
        match self {
            SweepAxis::Proportion => {
                if config.dataset_dir.is_some() {
                    return Err(Error::config(
                        "cannot sweep the proportion of a loaded dataset",
                    ));
                }
                config.benchmark.out_proportion = value;
            }
            SweepAxis::TauSl => config.labeling.tau_sl = value,
            SweepAxis::Lambda => config.ssl.lambda = value,
            SweepAxis::KFraction => config.labeling.k_fraction = value,
            SweepAxis::Eta => config.detection.eta = value,
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: f64,
    pub outcome: std::result::Result<Report, String>,
}

/// One run per value with the base config's seed; failures are recorded and
/// the sweep moves on. Runs land in `<output_dir>/<axis>_<index>` when an
/// output directory is set.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::invalid("run_sweep", "no values to sweep"));
    }
    let mut cache = PretrainCache::default();
    let mut rows = Vec::with_capacity(values.len());
    for (i, &value) in values.iter().enumerate() {
        let mut config = base.clone();
        let outcome = axis.apply(&mut config, value).and_then(|_| {
            config.output_dir = base
                .output_dir
                .as_ref()
                .map(|d| d.join(format!("{}_{i:02}", axis.name())));
            run_experiment_cached(&config, &mut cache)
        });
        rows.push(SweepRow {
            value,
            outcome: outcome.map_err(|e| e.to_string()),
        });
    }
    if let Some(d) = &base.output_dir {
        write_sweep_csv(&d.join(format!("sweep_{}.csv", axis.name())), axis, &rows)?;
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_real).unwrap_or_default()
}

pub fn write_sweep_csv(path: &Path, axis: SweepAxis, rows: &[SweepRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        axis.name(),
        "median_accuracy",
        "best_accuracy",
        "auroc",
        "tpr_out_positive",
        "tnr_out_positive",
        "threshold",
        "split_in",
        "split_out",
        "pseudo_count",
        "pseudo_accuracy",
        "error",
    ])?;
    for row in rows {
        let mut rec = vec![fmt_real(row.value)];
        match &row.outcome {
            Ok(r) => {
                let m = &r.metrics;
                rec.extend([
                    opt(m.median_accuracy),
                    opt(m.best_accuracy),
                    opt(m.detection.auroc),
                    opt(m.detection.out_positive.map(|x| x.tpr)),
                    opt(m.detection.out_positive.map(|x| x.tnr)),
                    fmt_real(m.detection.threshold.value),
                    m.split.in_class.to_string(),
                    m.split.out_class.to_string(),
                    m.pseudo_labels.count.to_string(),
                    opt(m.pseudo_labels.accuracy),
                    String::new(),
                ]);
            }
            Err(e) => {
                rec.extend(std::iter::repeat_n(String::new(), 10));
                rec.push(e.clone());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Plot-ready accuracy against out-of-class proportion, one row per report.
pub fn write_accuracy_curve<W: std::io::Write>(out: W, reports: &[(String, Report)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "run",
        "out_proportion",
        "median_accuracy",
        "best_accuracy",
        "final_accuracy",
    ])?;
    for (name, r) in reports {
        let m = &r.metrics;
        w.write_record([
            name.clone(),
            fmt_real(r.config.benchmark.out_proportion),
            opt(m.median_accuracy),
            opt(m.best_accuracy),
            opt(m.checkpoint_accuracies.last().copied()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// All `report.json` files directly under `dir` or one level below it, by path.
pub fn collect_reports(dir: &Path) -> Result<Vec<(String, Report)>> {
    let mut found = Vec::new();
    if dir.join("report.json").is_file() {
        found.push(dir.to_path_buf());
    }
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.join("report.json").is_file() {
            found.push(p);
        }
    }
    found.sort();
    found
        .into_iter()
        .map(|p| {
            let name = p.file_name().map_or_else(
                || p.display().to_string(),
                |n| n.to_string_lossy().into_owned(),
            );
            Ok((name, Report::load(&p.join("report.json"))?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentConfig;
    use crate::ssl::Toggles;

    pub(crate) fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            benchmark: BenchmarkSpec {
                dim: 6,
                in_classes: 3,
                out_classes: 2,
                total_unlabeled: 60,
                out_proportion: 0.5,
                labels_per_class: 3,
                test_per_class: 5,
                ..BenchmarkSpec::default()
            },
            model: ModelConfig {
                input_dim: 6,
                hidden_dims: vec![8],
                embed_dim: 6,
                proj_dim: 4,
                num_classes: 3,
                ..ModelConfig::default()
            },
            contrastive: ContrastiveConfig {
                batch_size: 16,
                steps: 5,
                ..ContrastiveConfig::default()
            },
            labeling: LabelingConfig {
                linear_eval_steps: 10,
                k_fraction: 0.2,
                ..LabelingConfig::default()
            },
            ssl: SslConfig {
                batch_size: 8,
                steps: 10,
                checkpoint_interval: 16,
                augment: AugmentConfig::default(),
                ..SslConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_json_round_trips_and_accepts_partial_input() {
        let c = tiny();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), c);
        let partial: ExperimentConfig =
            serde_json::from_str(r#"{"seed": 9, "ssl": {"lambda": 0.25}}"#).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.ssl.lambda, 0.25);
        assert_eq!(partial.ssl.batch_size, 64);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sede": 9}"#).is_err());
    }

    #[test]
    fn too_few_checkpoints_rejected() {
        let mut c = tiny();
        c.median_last = 6;
        assert!(matches!(
            run_experiment(&c),
            Err(Error::Stage {
                stage: "config",
                ..
            })
        ));
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let mut c = tiny();
        c.model.num_classes = 4;
        match run_experiment(&c) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "data"),
            other => panic!("{other:?}"),
        }
        let mut c = tiny();
        c.contrastive.batch_size = 1000;
        match run_experiment(&c) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "pretrain"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reports_are_deterministic_and_in_range() {
        let a = run_experiment(&tiny()).unwrap();
        let b = run_experiment(&tiny()).unwrap();
        assert_eq!(a.canonical_json().unwrap(), b.canonical_json().unwrap());
        let m = &a.metrics;
        assert_eq!(m.checkpoint_accuracies.len(), 5);
        assert!(m
            .checkpoint_accuracies
            .iter()
            .all(|a| (0.0..=1.0).contains(a)));
        let auroc = m.detection.auroc.unwrap();
        assert!((0.0..=1.0).contains(&auroc));
        assert_eq!(m.split.in_class + m.split.out_class, 60);
        assert_eq!(
            m.pseudo_labels.count,
            (0.2f64 * m.split.in_class as f64).ceil() as usize
        );
        assert_eq!(
            serde_json::to_string(&a.config).unwrap(),
            serde_json::to_string(&tiny()).unwrap()
        );
    }

    #[test]
    fn toggles_off_put_everything_in_class() {
        let mut c = tiny();
        c.ssl.toggles = Toggles::none();
        let r = run_experiment(&c).unwrap();
        assert_eq!(r.metrics.split.out_class, 0);
        assert_eq!(r.metrics.pseudo_labels.count, 0);
    }

    #[test]
    fn pretraining_is_reused_when_inputs_match() {
        let mut cache = PretrainCache::default();
        let a = run_experiment_cached(&tiny(), &mut cache).unwrap();
        let mut c = tiny();
        c.ssl.lambda = 0.0;
        let b = run_experiment_cached(&c, &mut cache).unwrap();
        assert!(!a.timings.pretrain_reused);
        assert!(b.timings.pretrain_reused);
        let fresh = run_experiment(&c).unwrap();
        assert_eq!(fresh.metrics, b.metrics);
    }

    #[test]
    fn persisted_manifests_reproduce_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.output_dir = Some(dir.path().to_path_buf());
        let r = run_experiment(&c).unwrap();
        assert_eq!(evaluate_dir(dir.path()).unwrap(), r.metrics);
        assert!(dir.path().join("checkpoints/step_000010.ckpt").is_file());
        let last = checkpoint::load(&dir.path().join("final.ckpt")).unwrap();
        assert_eq!(
            last,
            checkpoint::load(&dir.path().join("checkpoints/step_000010.ckpt")).unwrap()
        );
    }

    #[test]
    fn sweep_records_failures_and_continues() {
        let rows = run_sweep(&tiny(), SweepAxis::Eta, &[1.0, 2.0]).unwrap();
        assert!(rows.iter().all(|r| r.outcome.is_ok()));
        let rows = run_sweep(&tiny(), SweepAxis::TauSl, &[-1.0, 0.1]).unwrap();
        assert!(rows[0].outcome.is_err());
        assert!(rows[1].outcome.is_ok());
        assert!(run_sweep(&tiny(), SweepAxis::Eta, &[]).is_err());
    }

    #[test]
    fn single_value_sweep_matches_direct_run() {
        let rows = run_sweep(&tiny(), SweepAxis::Lambda, &[0.5]).unwrap();
        let direct = run_experiment(&tiny()).unwrap();
        assert_eq!(rows[0].outcome.as_ref().unwrap().metrics, direct.metrics);
    }
}
