//! `poison-scan`: score embedding datasets for backdoor-poisoned samples,
//! evaluate detection quality, filter datasets, generate synthetic data and
//! benchmark throughput.
//!
//! Every run prints a single-line JSON log with the fully resolved
//! configuration and wall time to stdout. Output artifacts (score, embedding,
//! label and CSV files) are byte-identical across runs with the same seed and
//! across thread counts; the log line is the one place wall-clock timing
//! appears.

use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use poison_scan_core::{
    detectors::{DetectorConfig, DetectorKind, LidDenominator},
    filtering::{self, FilterPolicy},
    metrics,
    pipeline::{self, BatchMode, DatasetHandle},
    store, synth, EmbeddingMatrix, SyntheticConfig,
};

#[derive(Parser)]
#[command(
    name = "poison-scan",
    version,
    about = "Detect backdoor-poisoned samples in embedding datasets with local outlier scores"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every sample of an embedding dataset.
    Score(ScoreArgs),
    /// Evaluate a score file against ground-truth labels.
    Eval(EvalArgs),
    /// Select removals from a score file and emit a purified dataset.
    Filter(FilterArgs),
    /// Generate a synthetic dataset and optional experiment grids.
    Synth(SynthArgs),
    /// Measure scoring throughput on generated data.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DetectorArg {
    Kdist,
    Slof,
    Lid,
    Dao,
    Iforest,
}

impl From<DetectorArg> for DetectorKind {
    fn from(arg: DetectorArg) -> Self {
        match arg {
            DetectorArg::Kdist => DetectorKind::KDist,
            DetectorArg::Slof => DetectorKind::Slof,
            DetectorArg::Lid => DetectorKind::Lid,
            DetectorArg::Dao => DetectorKind::Dao,
            DetectorArg::Iforest => DetectorKind::IForest,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Partition,
    Resample,
}

impl From<ModeArg> for BatchMode {
    fn from(arg: ModeArg) -> Self {
        match arg {
            ModeArg::Partition => BatchMode::Partition,
            ModeArg::Resample => BatchMode::Resample,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LidDenomArg {
    K,
    KMinusOne,
}

impl From<LidDenomArg> for LidDenominator {
    fn from(arg: LidDenomArg) -> Self {
        match arg {
            LidDenomArg::K => LidDenominator::K,
            LidDenomArg::KMinusOne => LidDenominator::KMinusOne,
        }
    }
}

/// Detector knobs shared by `score` and `bench`.
#[derive(Args)]
struct DetectorFlags {
    /// Detector kind.
    #[arg(long, value_enum, default_value = "dao")]
    detector: DetectorArg,
    /// Locality parameter k.
    #[arg(long, default_value_t = 16)]
    k: usize,
    /// Batch size for reference-set construction.
    #[arg(long, default_value_t = pipeline::DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    /// Distance clamp floor.
    #[arg(long, default_value_t = 1e-12)]
    epsilon: f64,
    /// Cap for LID estimates.
    #[arg(long, default_value_t = 1e6)]
    lid_cap: f64,
    /// LID-MLE normalizer.
    #[arg(long, value_enum, default_value = "k")]
    lid_denominator: LidDenomArg,
    /// iForest ensemble size.
    #[arg(long, default_value_t = 100)]
    trees: usize,
    /// iForest subsample size; defaults to min(256, reference-set size).
    #[arg(long)]
    psi: Option<usize>,
}

impl DetectorFlags {
    fn config(&self, seed: u64) -> DetectorConfig {
        let mut cfg = DetectorConfig::new(self.detector.into());
        cfg.k = self.k;
        cfg.epsilon = self.epsilon;
        cfg.lid_cap = self.lid_cap;
        cfg.lid_denominator = self.lid_denominator.into();
        cfg.iforest_trees = self.trees;
        cfg.iforest_subsample = self.psi;
        cfg.seed = seed;
        cfg
    }

    fn log(&self) -> serde_json::Value {
        json!({
            "detector": DetectorKind::from(self.detector).name(),
            "k": self.k,
            "batch_size": self.batch_size,
            "epsilon": self.epsilon,
            "lid_cap": self.lid_cap,
            "lid_denominator": match self.lid_denominator {
                LidDenomArg::K => "k",
                LidDenomArg::KMinusOne => "k-minus-one",
            },
            "trees": self.trees,
            "psi": self.psi,
        })
    }
}

#[derive(Args)]
struct ScoreArgs {
    /// Image embedding file (EMB1).
    #[arg(long)]
    images: PathBuf,
    /// Text embedding file (EMB1); enriches the reference set.
    #[arg(long)]
    texts: Option<PathBuf>,
    /// Fail unless text embeddings are supplied.
    #[arg(long, requires = "texts")]
    require_text: bool,
    #[command(flatten)]
    detector: DetectorFlags,
    /// Batching mode.
    #[arg(long, value_enum, default_value = "partition")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; falls back to POISON_SCAN_THREADS, then all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// L2-normalize embeddings before scoring (default).
    #[arg(long, overrides_with = "no_normalize")]
    normalize: bool,
    /// Score raw embeddings without normalization.
    #[arg(long)]
    no_normalize: bool,
    /// Output score file (SCR1).
    #[arg(long)]
    out: PathBuf,
    /// Also export scores as CSV (index,score).
    #[arg(long)]
    csv_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Score file (SCR1).
    #[arg(long)]
    scores: PathBuf,
    /// Label file (LBL1).
    #[arg(long)]
    labels: PathBuf,
    /// Write the evaluation report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("policy").required(true).multiple(false))]
struct FilterArgs {
    /// Score file (SCR1).
    #[arg(long)]
    scores: PathBuf,
    /// Image embedding file to purify.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Label file to purify alongside.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Remove this fraction of top-scoring samples (0 < f < 1).
    #[arg(long, group = "policy", value_parser = parse_fraction)]
    top_fraction: Option<f64>,
    /// Remove samples with score >= this threshold.
    #[arg(long, group = "policy")]
    threshold: Option<f64>,
    /// Remove samples with score >= mean + this multiple of the std.
    #[arg(long, group = "policy")]
    sigma_multiplier: Option<f64>,
    /// Output directory for removal lists and purified files.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Total samples.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Embedding dimensionality.
    #[arg(long, default_value_t = 512, value_parser = clap::value_parser!(u64).range(1..))]
    dim: u64,
    /// Clean cluster count.
    #[arg(long, default_value_t = 50)]
    clusters: usize,
    /// Backdoor fraction in [0, 0.2].
    #[arg(long, default_value_t = 0.0001)]
    poison_rate: f64,
    #[arg(long, default_value_t = 0.2)]
    sigma_clean: f64,
    #[arg(long, default_value_t = 0.02)]
    sigma_backdoor: f64,
    /// Backdoor centroid separation in units of sigma_clean.
    #[arg(long, default_value_t = 5.0)]
    backdoor_offset: f64,
    /// Skip text embeddings.
    #[arg(long)]
    no_text: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (images.emb, texts.emb, labels.lbl).
    #[arg(long)]
    out_dir: PathBuf,
    /// Run the kdist-distribution experiment for these within-batch
    /// backdoor counts (comma-separated) and write kdist_experiment.csv.
    #[arg(long, value_delimiter = ',')]
    kdist_counts: Option<Vec<usize>>,
    /// Batch size for the kdist experiment.
    #[arg(long, default_value_t = 1024)]
    experiment_batch_size: usize,
    /// Locality for the kdist experiment.
    #[arg(long, default_value_t = 16)]
    experiment_k: usize,
    /// Run the poisoning-rate sensitivity sweep over these rates
    /// (comma-separated) and write rate_sweep.csv.
    #[arg(long, value_delimiter = ',')]
    sweep_rates: Option<Vec<f64>>,
    /// Locality values for the sweep (comma-separated).
    #[arg(long, value_delimiter = ',', default_value = "16")]
    sweep_k: Vec<usize>,
    /// Batch size for the sweep.
    #[arg(long, default_value_t = pipeline::DEFAULT_BATCH_SIZE)]
    sweep_batch_size: usize,
    /// Worker threads for the sweep; falls back to POISON_SCAN_THREADS.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    /// Samples to generate and score.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Embedding dimensionality.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    dim: u64,
    #[command(flatten)]
    detector: DetectorFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; falls back to POISON_SCAN_THREADS, then all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Write the throughput report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also persist the computed scores (SCR1).
    #[arg(long)]
    scores_out: Option<PathBuf>,
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("fraction must lie in (0, 1), got {v}"))
    }
}

fn resolve_threads(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("POISON_SCAN_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .filter(|&t| t > 0)
    .unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(NonZeroUsize::get)
            .unwrap_or(1)
    })
}

fn thread_pool(threads: usize) -> anyhow::Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("building worker pool")
}

fn emit_log(value: &serde_json::Value) {
    println!("{value}");
}

fn load_embeddings(path: &Path) -> anyhow::Result<EmbeddingMatrix> {
    store::load_embeddings(path).with_context(|| format!("loading embeddings {}", path.display()))
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Score(args) => cmd_score(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Filter(args) => cmd_filter(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn cmd_score(args: ScoreArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let normalize = !args.no_normalize;
    let threads = resolve_threads(args.threads);

    let mut images = load_embeddings(&args.images)?;
    let mut texts = args.texts.as_deref().map(load_embeddings).transpose()?;
    if normalize {
        images = images.l2_normalize().context("normalizing --images")?;
        texts = texts
            .map(|t| t.l2_normalize().context("normalizing --texts"))
            .transpose()?;
    }

    let handle = DatasetHandle::new(&images, texts.as_ref(), None)?;
    let plan = pipeline::plan_batches(
        images.count(),
        args.detector.batch_size,
        args.detector.k,
        args.seed,
        args.mode.into(),
    )?;
    let det = args.detector.config(args.seed);

    let score_started = Instant::now();
    let scores = thread_pool(threads)?.install(|| pipeline::score_dataset(&handle, &det, &plan))?;
    let scoring_seconds = score_started.elapsed().as_secs_f64();

    store::write_scores(&args.out, &scores)
        .with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(csv) = &args.csv_out {
        store::write_scores_csv(csv, &scores)
            .with_context(|| format!("writing {}", csv.display()))?;
    }

    emit_log(&json!({
        "subcommand": "score",
        "config": {
            "images": args.images,
            "texts": args.texts,
            "require_text": args.require_text,
            "mode": BatchMode::from(args.mode).to_string(),
            "seed": args.seed,
            "threads": threads,
            "normalize": normalize,
            "detector": args.detector.log(),
        },
        "n_samples": scores.count(),
        "n_batches": plan.batches().len(),
        "outputs": { "scores": args.out, "csv": args.csv_out },
        "scoring_seconds": scoring_seconds,
        "wall_time_seconds": started.elapsed().as_secs_f64(),
    }));
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let scores = store::load_scores(&args.scores)
        .with_context(|| format!("loading scores {}", args.scores.display()))?;
    let labels = store::load_labels(&args.labels)
        .with_context(|| format!("loading labels {}", args.labels.display()))?;

    // Score files carry no timing, so the report's scoring wall time is 0.
    let report = metrics::evaluate(&scores, &labels, 0.0)?;
    let report_json = serde_json::to_value(&report)?;
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", out.display()))?;
    }

    emit_log(&json!({
        "subcommand": "eval",
        "config": { "scores": args.scores, "labels": args.labels },
        "report": report_json,
        "outputs": { "report": args.out },
        "wall_time_seconds": started.elapsed().as_secs_f64(),
    }));
    Ok(())
}

fn cmd_filter(args: FilterArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let scores = store::load_scores(&args.scores)
        .with_context(|| format!("loading scores {}", args.scores.display()))?;

    let (policy, policy_log) = if let Some(f) = args.top_fraction {
        (FilterPolicy::TopFraction(f), json!({"top_fraction": f}))
    } else if let Some(t) = args.threshold {
        (FilterPolicy::AbsoluteThreshold(t), json!({"threshold": t}))
    } else {
        let m = args.sigma_multiplier.expect("clap enforces the policy group");
        (FilterPolicy::MeanPlusStd(m), json!({"sigma_multiplier": m}))
    };

    let removed = filtering::select_removals(&scores, &policy)?;
    let kept = filtering::purify_indices(scores.count(), &removed)?;

    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let removed_path = args.out_dir.join("removed.txt");
    let kept_path = args.out_dir.join("kept.txt");
    write_index_list(&removed_path, &removed)?;
    write_index_list(&kept_path, &kept)?;

    let mut purified_emb = None;
    if let Some(images_path) = &args.images {
        let images = load_embeddings(images_path)?;
        let purified = filtering::purify_embeddings(&images, &kept)?;
        let path = args.out_dir.join("purified.emb");
        store::write_embeddings(&path, &purified)
            .with_context(|| format!("writing {}", path.display()))?;
        purified_emb = Some(path);
    }
    let mut purified_lbl = None;
    if let Some(labels_path) = &args.labels {
        let labels = store::load_labels(labels_path)
            .with_context(|| format!("loading labels {}", labels_path.display()))?;
        let purified = filtering::purify_labels(&labels, &kept)?;
        let path = args.out_dir.join("purified.lbl");
        store::write_labels(&path, &purified)
            .with_context(|| format!("writing {}", path.display()))?;
        purified_lbl = Some(path);
    }

    emit_log(&json!({
        "subcommand": "filter",
        "config": {
            "scores": args.scores,
            "images": args.images,
            "labels": args.labels,
            "policy": policy_log,
        },
        "n_removed": removed.len(),
        "n_kept": kept.len(),
        "outputs": {
            "removed": removed_path,
            "kept": kept_path,
            "purified_embeddings": purified_emb,
            "purified_labels": purified_lbl,
        },
        "wall_time_seconds": started.elapsed().as_secs_f64(),
    }));
    Ok(())
}

fn write_index_list(path: &Path, indices: &[usize]) -> anyhow::Result<()> {
    let mut text = String::with_capacity(indices.len() * 8);
    for i in indices {
        text.push_str(&i.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut cfg = SyntheticConfig::new(args.n as usize, args.seed);
    cfg.d = args.dim as usize;
    cfg.n_clusters = args.clusters;
    cfg.poison_rate = args.poison_rate;
    cfg.sigma_clean = args.sigma_clean;
    cfg.sigma_backdoor = args.sigma_backdoor;
    cfg.backdoor_offset = args.backdoor_offset;
    cfg.with_text = !args.no_text;

    let dataset = synth::generate(&cfg)?;
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let images_path = args.out_dir.join("images.emb");
    let labels_path = args.out_dir.join("labels.lbl");
    store::write_embeddings(&images_path, &dataset.images)?;
    store::write_labels(&labels_path, &dataset.labels)?;
    let texts_path = match &dataset.texts {
        Some(texts) => {
            let path = args.out_dir.join("texts.emb");
            store::write_embeddings(&path, texts)?;
            Some(path)
        }
        None => None,
    };

    let mut kdist_csv = None;
    if let Some(counts) = &args.kdist_counts {
        let summaries = synth::kdist_distribution_experiment(
            &cfg,
            args.experiment_batch_size,
            args.experiment_k,
            counts,
        )?;
        let mut text = String::from(
            "backdoor_count,clean_q1,clean_median,clean_q3,backdoor_q1,backdoor_median,backdoor_q3\n",
        );
        for s in &summaries {
            text.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.backdoor_count,
                s.clean.q1,
                s.clean.median,
                s.clean.q3,
                s.backdoor.q1,
                s.backdoor.median,
                s.backdoor.q3
            ));
        }
        let path = args.out_dir.join("kdist_experiment.csv");
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        kdist_csv = Some(path);
    }

    let mut sweep_csv_path = None;
    if let Some(rates) = &args.sweep_rates {
        let threads = resolve_threads(args.threads);
        let cells = thread_pool(threads)?.install(|| {
            synth::poison_rate_sensitivity_sweep(&cfg, args.sweep_batch_size, rates, &args.sweep_k)
        })?;
        let path = args.out_dir.join("rate_sweep.csv");
        std::fs::write(&path, synth::sweep_csv(&cells))
            .with_context(|| format!("writing {}", path.display()))?;
        sweep_csv_path = Some(path);
    }

    emit_log(&json!({
        "subcommand": "synth",
        "config": {
            "n": cfg.n,
            "dim": cfg.d,
            "clusters": cfg.n_clusters,
            "poison_rate": cfg.poison_rate,
            "sigma_clean": cfg.sigma_clean,
            "sigma_backdoor": cfg.sigma_backdoor,
            "backdoor_offset": cfg.backdoor_offset,
            "with_text": cfg.with_text,
            "seed": cfg.seed,
        },
        "n_backdoor": dataset.labels.n_backdoor(),
        "outputs": {
            "images": images_path,
            "texts": texts_path,
            "labels": labels_path,
            "kdist_experiment": kdist_csv,
            "rate_sweep": sweep_csv_path,
        },
        "wall_time_seconds": started.elapsed().as_secs_f64(),
    }));
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let threads = resolve_threads(args.threads);

    // image-only unlabeled data; text references would only change the
    // constant factor being measured
    let mut cfg = SyntheticConfig::new(args.n as usize, args.seed);
    cfg.d = args.dim as usize;
    cfg.poison_rate = 0.0;
    cfg.with_text = false;

    let gen_started = Instant::now();
    let dataset = synth::generate(&cfg)?;
    let generation_seconds = gen_started.elapsed().as_secs_f64();

    let handle = DatasetHandle::new(&dataset.images, None, None)?;
    let plan = pipeline::plan_batches(
        cfg.n,
        args.detector.batch_size,
        args.detector.k,
        args.seed,
        BatchMode::Partition,
    )?;
    let det = args.detector.config(args.seed);

    let score_started = Instant::now();
    let scores = thread_pool(threads)?.install(|| pipeline::score_dataset(&handle, &det, &plan))?;
    let scoring_seconds = score_started.elapsed().as_secs_f64();

    if let Some(path) = &args.scores_out {
        store::write_scores(path, &scores)
            .with_context(|| format!("writing {}", path.display()))?;
    }

    let report = json!({
        "n": cfg.n,
        "dim": cfg.d,
        "detector": DetectorKind::from(args.detector.detector).name(),
        "k": args.detector.k,
        "batch_size": args.detector.batch_size,
        "threads": threads,
        "generation_seconds": generation_seconds,
        "scoring_seconds": scoring_seconds,
        "samples_per_second": cfg.n as f64 / scoring_seconds,
    });
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", out.display()))?;
    }

    emit_log(&json!({
        "subcommand": "bench",
        "config": {
            "seed": args.seed,
            "threads": threads,
            "detector": args.detector.log(),
        },
        "report": report,
        "outputs": { "report": args.out, "scores": args.scores_out },
        "wall_time_seconds": started.elapsed().as_secs_f64(),
    }));
    Ok(())
}
