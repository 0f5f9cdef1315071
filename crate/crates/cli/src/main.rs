//! Command-line front end for the NIRec pipeline.
//!
//! The subcommands mirror the pipeline stages: `ingest` turns relation
//! files into a dataset bundle, `train` fits a model on a bundle and
//! writes a checkpoint, `eval` scores one split, `export-attention`
//! dumps per-instance attention weights as CSV, `bench-conv` compares
//! the two convolution backends, and `gradcheck` runs the end-to-end
//! finite-difference gradient check.
//!
//! Conventions, uniform across subcommands:
//!
//! * stdout carries only the report; diagnostics and progress go to
//!   stderr (`RUST_LOG` controls verbosity).
//! * exit code 0 means success; 1 means any failure, with the cause
//!   chain printed to stderr.
//! * every command that writes files also writes a manifest beside them
//!   (`run_manifest.json` in an output directory, `<name>.manifest.json`
//!   next to a single output file) capturing the resolved flags, the
//!   config snapshot, the seed, and the results, so a run can be
//!   reproduced from its manifest alone.
//! * `--workers` falls back to the `NIREC_WORKERS` environment variable,
//!   then to all available cores; benchmarks and gradient checks are
//!   deliberately single-threaded.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use nirec_core::bench::{bench_conv, BenchConfig, BenchError, BenchReport};
use nirec_core::bundle::{load_bundle, save_bundle, Bundle, BundleError};
use nirec_core::checkpoint::{self, CheckpointError};
use nirec_core::config::{ConfigError, RunConfig};
use nirec_core::eval::{evaluate, EvalError};
use nirec_core::export::{attention_rows, write_csv, ExportError};
use nirec_core::gradcheck::{run_toy_check, GradcheckError};
use nirec_core::ingest::{ingest, IngestError, Instance};
use nirec_core::model::{Model, ModelConfig, ModelError};
use nirec_core::sampler::{anchor_sets, prepare_samples, SampleError};
use nirec_core::train::{train, TrainError};

/// Anything a subcommand can fail with, each variant carrying enough
/// context (file or flag) to act on the message alone.
#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("ingesting relation files: {0}")]
    Ingest(#[from] IngestError),
    #[error("sampling walks: {0}")]
    Sample(#[from] SampleError),
    #[error("dataset bundle: {0}")]
    Bundle(#[from] BundleError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("evaluating: {0}")]
    Eval(#[from] EvalError),
    #[error("exporting attention: {0}")]
    Export(#[from] ExportError),
    #[error("benchmark: {0}")]
    Bench(#[from] BenchError),
    #[error("gradient check: {0}")]
    Gradcheck(#[from] GradcheckError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("NIREC_WORKERS must be a non-negative integer, got {got:?}")]
    WorkersEnv { got: String },
    #[error(
        "--config {path} disagrees with the bundle's recorded {section}; \
         re-run ingest with this config instead"
    )]
    ConfigMismatch { path: PathBuf, section: &'static str },
    #[error("--max-len {max} is smaller than --min-len {min}")]
    BadLengthRange { min: usize, max: usize },
    #[error("gradient check failed; see the report on stdout")]
    GradcheckFailed,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Parser)]
#[command(
    name = "nirec",
    version,
    about = "Neighborhood-interaction recommendation on heterogeneous information networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read relation files, split the ratings, sample walks, and write a
    /// dataset bundle directory.
    Ingest(IngestArgs),
    /// Train on a bundle; write a checkpoint, per-epoch metrics CSV, and
    /// the final test metrics.
    Train(TrainArgs),
    /// Score one split with a trained model and print the metric report.
    Eval(EvalArgs),
    /// Write per-instance attention weights for one split as CSV.
    ExportAttention(ExportArgs),
    /// Time both convolution backends over a size sweep and fit scaling
    /// exponents.
    BenchConv(BenchArgs),
    /// Run the end-to-end finite-difference gradient check on the toy
    /// network; exits nonzero if any parameter fails.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Run config JSON; relation file paths resolve relative to it.
    #[arg(long)]
    config: PathBuf,
    /// Bundle directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's seed (splits and walk sampling).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Bundle directory produced by `ingest`.
    #[arg(long)]
    data: PathBuf,
    /// Optional config overriding the bundle's hyperparameters; its schema
    /// and metapaths must match the bundle's.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for model.nirec, metrics.csv, and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Override the training seed (initialization and batch order).
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluation worker threads; defaults to NIREC_WORKERS, then all cores.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Bundle directory produced by `ingest`.
    #[arg(long)]
    data: PathBuf,
    /// Which split to score.
    #[arg(long, value_enum)]
    split: SplitName,
    /// Worker threads; defaults to NIREC_WORKERS, then all cores.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct ExportArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Bundle directory produced by `ingest`.
    #[arg(long)]
    data: PathBuf,
    /// Which split to export.
    #[arg(long, value_enum)]
    split: SplitName,
    /// Interaction elements to keep per instance, by attention weight.
    #[arg(long, default_value_t = 5)]
    topk: usize,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Smallest neighborhood length; lengths double up to --max-len.
    #[arg(long, default_value_t = 64)]
    min_len: usize,
    /// Largest neighborhood length.
    #[arg(long, default_value_t = 4096)]
    max_len: usize,
    /// Walks per neighborhood (channel rows per call).
    #[arg(long, default_value_t = 4)]
    paths: usize,
    /// Embedding width (channel columns per call).
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Timing repetitions per size; the median is reported.
    #[arg(long, default_value_t = 7)]
    reps: usize,
    /// Seed for the timed inputs.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Optional CSV file for the per-size statistics.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the toy dataset, the parameter draw, and the walks.
    #[arg(long, default_value_t = 9)]
    seed: u64,
    /// Worst tolerated relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    fn instances<'a>(&self, bundle: &'a Bundle) -> &'a [Instance] {
        let split = &bundle.dataset.split;
        match self {
            SplitName::Train => &split.train,
            SplitName::Valid => &split.valid,
            SplitName::Test => &split.test,
        }
    }

    fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }
}

/// Reproducibility record written beside every command's outputs.
#[derive(Serialize)]
struct RunManifest {
    command: &'static str,
    version: &'static str,
    seed: u64,
    /// The resolved flags, exactly as needed to repeat the run.
    args: serde_json::Value,
    /// Snapshot of the run config in force, when one participates.
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<RunConfig>,
    results: serde_json::Value,
}

impl RunManifest {
    fn new(command: &'static str, seed: u64) -> Self {
        RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            args: serde_json::Value::Null,
            config: None,
            results: serde_json::Value::Null,
        }
    }

    /// Writes `run_manifest.json` into `dir`.
    fn write_in_dir(&self, dir: &Path) -> Result<(), CliError> {
        self.write_to(&dir.join("run_manifest.json"))
    }

    /// Writes `<stem>.manifest.json` next to the output file `out`.
    fn write_beside(&self, out: &Path) -> Result<(), CliError> {
        self.write_to(&out.with_extension("manifest.json"))
    }

    fn write_to(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(io_err(path))
    }
}

/// Resolves the worker count: flag, then NIREC_WORKERS, then 0 (all cores).
fn resolve_workers(flag: Option<usize>) -> Result<usize, CliError> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var("NIREC_WORKERS") {
        Ok(text) => text
            .trim()
            .parse()
            .map_err(|_| CliError::WorkersEnv { got: text }),
        Err(_) => Ok(0),
    }
}

fn print_json<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("report serializes")
    );
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            // Many error messages already interpolate their source; only
            // print a cause when it adds something the parent did not say.
            let mut parent = err.to_string();
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                let text = cause.to_string();
                if !parent.contains(&text) {
                    eprintln!("  caused by: {text}");
                }
                parent = text;
                source = cause.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Ingest(args) => run_ingest(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::ExportAttention(args) => run_export(args),
        Command::BenchConv(args) => run_bench(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    }
}

fn run_ingest(args: IngestArgs) -> Result<(), CliError> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.hyper.seed = seed;
    }
    let base = args.config.parent().unwrap_or(Path::new("."));
    let dataset = ingest(&config, base)?;
    log::info!(
        "ingested {} instances over {} node types",
        dataset.stats.instances,
        dataset.stats.type_counts.len()
    );

    let metapaths = config.build_metapaths(dataset.graph.schema())?;
    let split = &dataset.split;
    let (users, items) = anchor_sets(&[&split.train, &split.valid, &split.test]);
    let store = prepare_samples(
        &dataset.graph,
        &metapaths,
        dataset.user_type,
        dataset.item_type,
        &users,
        &items,
        config.hyper.walks,
        config.hyper.seed,
    )?;
    log::info!(
        "sampled {} walks per metapath for {} users and {} items",
        config.hyper.walks,
        users.len(),
        items.len()
    );
    save_bundle(&args.out, &config, &dataset, &store)?;

    let mut manifest = RunManifest::new("ingest", config.hyper.seed);
    manifest.args = serde_json::json!({
        "config": args.config,
        "out": args.out,
        "seed": args.seed,
    });
    manifest.results = serde_json::to_value(&dataset.stats).expect("stats serialize");
    manifest.config = Some(config);
    manifest.write_in_dir(&args.out)?;

    print_json(&dataset.stats);
    Ok(())
}

/// Two config sections must survive from ingest to train unchanged: the
/// schema (it defines the node-type universe the graph was built in) and
/// the metapath list (the bundle's walks were sampled along them).
fn check_config_compatible(
    path: &Path,
    override_config: &RunConfig,
    bundle_config: &RunConfig,
) -> Result<(), CliError> {
    let json = |v: &nirec_core::config::SchemaConfig| {
        serde_json::to_value(v).expect("schema serializes")
    };
    if json(&override_config.schema) != json(&bundle_config.schema) {
        return Err(CliError::ConfigMismatch {
            path: path.to_path_buf(),
            section: "schema",
        });
    }
    if override_config.metapaths != bundle_config.metapaths {
        return Err(CliError::ConfigMismatch {
            path: path.to_path_buf(),
            section: "metapaths",
        });
    }
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let bundle = load_bundle(&args.data)?;
    let mut config = match &args.config {
        Some(path) => {
            let override_config = RunConfig::load(path)?;
            check_config_compatible(path, &override_config, &bundle.manifest.config)?;
            override_config
        }
        None => bundle.manifest.config.clone(),
    };
    if let Some(seed) = args.seed {
        config.hyper.seed = seed;
    }
    config.hyper.workers = resolve_workers(args.workers)?;

    let model_config = ModelConfig::from_run(&config, &bundle.dataset.graph)?;
    let mut model = Model::init(model_config, config.hyper.seed)?;
    let report = train(&mut model, &bundle.dataset, &bundle.store, &config.hyper)?;
    let (test_metrics, _) = evaluate(
        &model,
        &bundle.dataset.split.test,
        &bundle.store,
        config.hyper.workers,
    )?;

    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let model_path = args.out.join("model.nirec");
    checkpoint::save(&model_path, &model, config.hyper.seed, &report.history)?;

    // Per-epoch CSV keeps only the deterministic columns, so two runs with
    // the same seed produce byte-identical files; wall time lives in the
    // checkpoint history and the manifest instead.
    let csv_path = args.out.join("metrics.csv");
    let mut csv = String::from("epoch,train_loss,valid_auc,valid_acc\n");
    for epoch in &report.history {
        writeln!(
            csv,
            "{},{},{},{}",
            epoch.epoch, epoch.train_loss, epoch.valid_auc, epoch.valid_acc
        )
        .expect("string write");
    }
    fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;

    let gap = config.reference.as_ref().map(|reference| {
        serde_json::json!({
            "auc": test_metrics.auc - reference.auc,
            "acc": test_metrics.acc - reference.acc,
        })
    });
    let summary = serde_json::json!({
        "best_epoch": report.best_epoch,
        "best_valid_auc": report.best_auc,
        "epochs_run": report.history.len(),
        "stopped_early": report.stopped_early,
        "test": test_metrics,
        "reference": config.reference,
        "reference_gap": gap,
    });

    let mut manifest = RunManifest::new("train", config.hyper.seed);
    manifest.args = serde_json::json!({
        "data": args.data,
        "config": args.config,
        "out": args.out,
        "seed": args.seed,
        "workers": config.hyper.workers,
    });
    manifest.results = summary.clone();
    manifest.config = Some(config);
    manifest.write_in_dir(&args.out)?;

    log::info!(
        "wrote {} and {}",
        model_path.display(),
        csv_path.display()
    );
    print_json(&summary);
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<(), CliError> {
    let loaded = checkpoint::load(&args.model)?;
    let bundle = load_bundle(&args.data)?;
    let workers = resolve_workers(args.workers)?;
    let instances = args.split.instances(&bundle);
    let (metrics, _) = evaluate(&loaded.model, instances, &bundle.store, workers)?;
    let report = serde_json::json!({
        "split": args.split.as_str(),
        "metrics": metrics,
    });
    print_json(&report);
    Ok(())
}

fn run_export(args: ExportArgs) -> Result<(), CliError> {
    let loaded = checkpoint::load(&args.model)?;
    let bundle = load_bundle(&args.data)?;
    let instances = args.split.instances(&bundle);
    let rows = attention_rows(
        &loaded.model,
        &bundle.dataset,
        instances,
        &bundle.store,
        args.topk,
    )?;
    let labels = &loaded.model.config().metapath_labels;
    let mut buffer = Vec::new();
    write_csv(&mut buffer, &rows, labels, args.topk).map_err(io_err(&args.out))?;
    fs::write(&args.out, &buffer).map_err(io_err(&args.out))?;

    let mut manifest = RunManifest::new("export-attention", loaded.meta.seed);
    manifest.args = serde_json::json!({
        "model": args.model,
        "data": args.data,
        "split": args.split.as_str(),
        "topk": args.topk,
        "out": args.out,
    });
    manifest.results = serde_json::json!({
        "instances": rows.len(),
        "metapaths": labels,
    });
    manifest.write_beside(&args.out)?;

    let report = serde_json::json!({
        "split": args.split.as_str(),
        "instances": rows.len(),
        "out": args.out,
    });
    print_json(&report);
    Ok(())
}

fn bench_csv(report: &BenchReport) -> String {
    let mut csv = String::from(
        "size,naive_mean_s,naive_median_s,naive_stddev_s,fft_mean_s,fft_median_s,fft_stddev_s\n",
    );
    for row in &report.rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            row.size,
            row.naive.mean,
            row.naive.median,
            row.naive.stddev,
            row.fft.mean,
            row.fft.median,
            row.fft.stddev
        )
        .expect("string write");
    }
    csv
}

fn run_bench(args: BenchArgs) -> Result<(), CliError> {
    if args.max_len < args.min_len {
        return Err(CliError::BadLengthRange {
            min: args.min_len,
            max: args.max_len,
        });
    }
    let mut sizes = Vec::new();
    let mut size = args.min_len.max(1);
    while size <= args.max_len {
        sizes.push(size);
        size *= 2;
    }
    let config = BenchConfig {
        sizes,
        walks: args.paths,
        dim: args.dim,
        reps: args.reps,
        seed: args.seed,
    };
    let report = bench_conv(&config)?;
    println!("{report}");

    if let Some(out) = &args.out {
        fs::write(out, bench_csv(&report)).map_err(io_err(out))?;
        let mut manifest = RunManifest::new("bench-conv", args.seed);
        manifest.args = serde_json::json!({
            "min_len": args.min_len,
            "max_len": args.max_len,
            "paths": args.paths,
            "dim": args.dim,
            "reps": args.reps,
            "seed": args.seed,
            "out": out,
        });
        manifest.results = serde_json::json!({
            "naive_slope": report.naive_slope,
            "fft_slope": report.fft_slope,
            "sizes": config.sizes,
            "channels": report.channels,
        });
        manifest.write_beside(out)?;
    }
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let report = run_toy_check(args.seed, args.tolerance)?;
    println!("{report}");
    if report.pass {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed)
    }
}
