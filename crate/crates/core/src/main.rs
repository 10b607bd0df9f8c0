use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use opencos::bench::{generate, Benchmark, CorrelationMode};
use opencos::checkpoint;
use opencos::experiment::{
    assemble_train_data, collect_reports, compute_metrics, evaluate_dir, load_benchmark,
    run_experiment, run_sweep, stage_detect, stage_label, stage_pretrain, stage_train,
    write_accuracy_curve, DetectionOutcome, ExperimentConfig, Report, SweepAxis,
};
use opencos::manifest;
use opencos::ssl::{Backend, Toggles};

#[derive(Parser)]
#[command(
    name = "opencos",
    version,
    about = "Open-set semi-supervised learning on synthetic benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark and write it to the output directory.
    Generate(Opts),
    /// Contrastive pretraining; writes pretrained.ckpt.
    Pretrain(Opts),
    /// Score and split the unlabeled pool; writes scores.csv.
    Detect(Opts),
    /// Soft-labels and pseudo-labels; writes soft_labels.csv and pseudo_labels.csv.
    Label(Opts),
    /// Fine-tune from the stage outputs; writes checkpoints, the trace and report.json.
    Train(Opts),
    /// All stages end to end.
    Run(Opts),
    /// One run per value along an axis, plus a combined CSV.
    Sweep {
        #[command(flatten)]
        opts: Opts,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Recompute metrics from a run directory and compare them with its report.
    Eval {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Accuracy-vs-proportion CSV from the reports under a directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Proportion,
    TauSl,
    Lambda,
    KFraction,
    Eta,
}

impl From<Axis> for SweepAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::Proportion => SweepAxis::Proportion,
            Axis::TauSl => SweepAxis::TauSl,
            Axis::Lambda => SweepAxis::Lambda,
            Axis::KFraction => SweepAxis::KFraction,
            Axis::Eta => SweepAxis::Eta,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Independent,
    Related,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Consistency,
    HardPseudo,
}

#[derive(Args, Clone)]
struct Opts {
    /// JSON experiment config; its fields override the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; also seeds the benchmark.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Load the benchmark from this directory instead of generating it.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    in_classes: Option<usize>,
    #[arg(long)]
    out_classes: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    total_unlabeled: Option<usize>,
    #[arg(long)]
    out_proportion: Option<f64>,
    #[arg(long)]
    labels_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    pretrain_steps: Option<usize>,
    #[arg(long)]
    train_steps: Option<usize>,
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    #[arg(long)]
    median_last: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    tau_sl: Option<f64>,
    #[arg(long)]
    k_fraction: Option<f64>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Enabled components, e.g. `detect,aux_loss`; `none` disables all.
    #[arg(long, value_delimiter = ',')]
    toggles: Option<Vec<String>>,
}

fn parse_toggles(names: &[String]) -> anyhow::Result<Toggles> {
    let mut t = Toggles::none();
    for n in names {
        match n.as_str() {
            "none" => {}
            "detect" => t.detect = true,
            "aux_loss" => t.aux_loss = true,
            "aux_bn" => t.aux_bn = true,
            "topk_pl" => t.topk_pl = true,
            "all" => t = Toggles::all(),
            other => bail!("unknown toggle `{other}`"),
        }
    }
    Ok(t)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Overwrites `base` with `patch`, recursing into objects.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

impl Opts {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut c = ExperimentConfig::default();
        if let Some(seed) = self.seed {
            c = c.with_seed(seed);
        }
        set(&mut c.output_dir, self.output.clone().map(Some));
        set(&mut c.dataset_dir, self.dataset.clone().map(Some));
        let b = &mut c.benchmark;
        set(&mut b.dim, self.dim);
        set(&mut b.in_classes, self.in_classes);
        set(&mut b.out_classes, self.out_classes);
        set(&mut b.separation, self.separation);
        set(
            &mut b.mode,
            self.mode.map(|m| match m {
                Mode::Independent => CorrelationMode::Independent,
                Mode::Related => CorrelationMode::Related,
            }),
        );
        set(&mut b.total_unlabeled, self.total_unlabeled);
        set(&mut b.out_proportion, self.out_proportion);
        set(&mut b.labels_per_class, self.labels_per_class);
        set(&mut b.test_per_class, self.test_per_class);
        c.model.input_dim = c.benchmark.dim;
        c.model.num_classes = c.benchmark.in_classes;
        set(&mut c.contrastive.steps, self.pretrain_steps);
        set(&mut c.ssl.steps, self.train_steps);
        set(&mut c.ssl.checkpoint_interval, self.checkpoint_interval);
        set(&mut c.median_last, self.median_last);
        set(&mut c.ssl.beta, self.beta);
        set(&mut c.ssl.lambda, self.lambda);
        set(&mut c.detection.eta, self.eta);
        set(
            &mut c.detection.explicit_threshold,
            self.threshold.map(Some),
        );
        set(&mut c.labeling.tau_sl, self.tau_sl);
        set(&mut c.labeling.k_fraction, self.k_fraction);
        set(
            &mut c.ssl.backend,
            self.backend.map(|b| match b {
                BackendArg::Consistency => Backend::Consistency,
                BackendArg::HardPseudo => Backend::HardPseudo { threshold: 0.95 },
            }),
        );
        if let Some(names) = &self.toggles {
            c.ssl.toggles = parse_toggles(names)?;
        }

        if let Some(path) = &self.config {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let patch: Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            let mut merged = serde_json::to_value(&c)?;
            merge(&mut merged, patch);
            c = serde_json::from_value(merged)
                .with_context(|| format!("invalid config {}", path.display()))?;
        }
        Ok(c)
    }
}

fn output_dir(c: &ExperimentConfig) -> anyhow::Result<&Path> {
    match &c.output_dir {
        Some(d) => Ok(d),
        None => bail!("this command needs --output (or output_dir in the config)"),
    }
}

/// The benchmark saved by an earlier stage.
fn stage_inputs(c: &ExperimentConfig) -> anyhow::Result<(&Path, Benchmark, opencos::model::Model)> {
    let dir = output_dir(c)?;
    let bench = Benchmark::load(&dir.join("benchmark"))
        .context("loading the benchmark written by `pretrain`")?;
    let model =
        checkpoint::load(&dir.join("pretrained.ckpt")).context("loading pretrained.ckpt")?;
    Ok((dir, bench, model))
}

fn detection_from(dir: &Path, c: &ExperimentConfig) -> anyhow::Result<DetectionOutcome> {
    let rows = manifest::read_scores(&dir.join("scores.csv"))
        .context("loading scores.csv written by `detect`")?;
    Ok(DetectionOutcome::from_rows(&rows, &c.detection)?)
}

fn print_json<T: serde::Serialize>(v: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Generate(opts) => {
            let c = opts.config()?;
            let dir = output_dir(&c)?;
            generate(&c.benchmark)?.save(dir)?;
            eprintln!("wrote benchmark to {}", dir.display());
        }
        Command::Pretrain(opts) => {
            let c = opts.config()?;
            c.validate()?;
            let dir = output_dir(&c)?;
            let bench = load_benchmark(&c)?;
            bench.save(&dir.join("benchmark"))?;
            let pre = stage_pretrain(&c, &bench).map_err(|e| e.in_stage("pretrain"))?;
            manifest::write_pretrain_trace(&dir.join("pretrain_trace.csv"), &pre.trace)?;
            checkpoint::save(&pre.model, &dir.join("pretrained.ckpt"))?;
            eprintln!("pretrained in {:.1}s", pre.seconds);
        }
        Command::Detect(opts) => {
            let c = opts.config()?;
            let (dir, bench, model) = stage_inputs(&c)?;
            let d = stage_detect(&c, &bench, &model).map_err(|e| e.in_stage("detect"))?;
            manifest::write_scores(&dir.join("scores.csv"), &d.score_rows())?;
            print_json(&d.threshold)?;
        }
        Command::Label(opts) => {
            let c = opts.config()?;
            let (dir, bench, model) = stage_inputs(&c)?;
            let d = detection_from(dir, &c)?;
            let l = stage_label(&c, &bench, &model, &d).map_err(|e| e.in_stage("label"))?;
            manifest::write_soft_labels(&dir.join("soft_labels.csv"), &l.soft_labels)?;
            manifest::write_pseudo_labels(&dir.join("pseudo_labels.csv"), &l.pseudo_labels)?;
            eprintln!(
                "{} soft-labels, {} pseudo-labels",
                l.soft_labels.len(),
                l.pseudo_labels.len()
            );
        }
        Command::Train(opts) => {
            let c = opts.config()?;
            c.validate()?;
            let (dir, bench, model) = stage_inputs(&c)?;
            let d = detection_from(dir, &c)?;
            let soft = manifest::read_soft_labels(&dir.join("soft_labels.csv"))?;
            let pseudo = manifest::read_pseudo_labels(&dir.join("pseudo_labels.csv"))?;
            let data = assemble_train_data(&c, &bench, &d, &soft, &pseudo)?;
            let state = stage_train(&c, &bench, model, &data, Some(dir))
                .map_err(|e| e.in_stage("train"))?;
            manifest::write_train_trace(&dir.join("train_trace.csv"), &state.trace)?;
            checkpoint::save(&state.model, &dir.join("final.ckpt"))?;
            let metrics = compute_metrics(&c, &bench, &d, &pseudo, state.accuracies())?;
            let report = Report {
                metrics,
                config: c.clone(),
                timings: Default::default(),
            };
            report.save(&dir.join("report.json"))?;
            print_json(&report.metrics)?;
        }
        Command::Run(opts) => {
            let c = opts.config()?;
            let report = run_experiment(&c)?;
            print_json(&report)?;
        }
        Command::Sweep { opts, axis, values } => {
            let c = opts.config()?;
            let axis = SweepAxis::from(axis);
            let rows = run_sweep(&c, axis, &values)?;
            let mut failed = 0;
            for row in &rows {
                match &row.outcome {
                    Ok(r) => println!(
                        "{}={}: median accuracy {}",
                        axis.name(),
                        row.value,
                        r.metrics
                            .median_accuracy
                            .map_or("n/a".into(), |a| format!("{a:.4}"))
                    ),
                    Err(e) => {
                        failed += 1;
                        println!("{}={}: error: {e}", axis.name(), row.value);
                    }
                }
            }
            if failed > 0 {
                bail!("{failed} of {} sweep runs failed", rows.len());
            }
        }
        Command::Eval { dir } => {
            let metrics = evaluate_dir(&dir)?;
            let report = Report::load(&dir.join("report.json"))?;
            print_json(&metrics)?;
            if metrics != report.metrics {
                bail!(
                    "recomputed metrics differ from {}",
                    dir.join("report.json").display()
                );
            }
            eprintln!("recomputed metrics match the report");
        }
        Command::Report { dir, out } => {
            let reports = collect_reports(&dir)?;
            if reports.is_empty() {
                bail!("no report.json found under {}", dir.display());
            }
            match out {
                Some(path) => write_accuracy_curve(fs::File::create(&path)?, &reports)?,
                None => write_accuracy_curve(std::io::stdout().lock(), &reports)?,
            }
        }
    }
    Ok(())
}
