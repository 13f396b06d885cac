use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mri_bench_core::dataset::{load_manifest, save_manifest, scan_dataset, stratified_split, verify_counts, ExpectedCounts, Layout, Split};
use mri_bench_core::eval::{
    evaluate, format_results_table, plot_curves, results_rows, summarize_best, write_report, EvaluationReport, Metric,
};
use mri_bench_core::model::checkpoint::read_sidecar;
use mri_bench_core::model::registry::BackboneId;
use mri_bench_core::model::{build_model, BuildOptions, WeightInit};
use mri_bench_core::pipeline::{calibrate_batch_norm, FileSource, SampleSource};
use mri_bench_core::synthetic::{write_phantom_dataset, ClassCounts};
use mri_bench_core::train::history::{read_history_csv, TrainingHistory};
use mri_bench_core::train::train;
use mri_bench_core::{Error, Result};

use crate::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "mri-bench", version, about = "Brain-MRI classification benchmark harness")]
#[command(after_help = "Any configuration key can be overridden with --section.key=value, e.g. --train.learning_rate=0.0001")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan a dataset, assign splits and write the manifest.
    Prepare(PrepareArgs),
    /// Train one backbone and head into a run directory.
    Train(TrainArgs),
    /// Evaluate a run's best checkpoint on a manifest split.
    Evaluate(EvaluateArgs),
    /// Aggregate runs into a results table and training curves.
    Report(ReportArgs),
    /// Write a synthetic phantom dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// pre_split or flat.
    #[arg(long)]
    pub layout: Option<String>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Re-split a pre-split dataset with the ratio and seed.
    #[arg(long)]
    pub resplit: bool,
    /// Compare counts with the public dataset's published distribution.
    #[arg(long)]
    pub expect_paper: bool,
    /// Exit 3 when the comparison finds a mismatch.
    #[arg(long)]
    pub strict: bool,
    /// Manifest path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub backbone: Option<String>,
    /// Seeds both the split and the training run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Defaults to `{run_root}/{backbone}-{scope}-seed{seed}`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Defaults to the manifest named in the run's configuration snapshot.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Defaults to `{run_dir}/report.toml`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, num_args = 0..)]
    pub runs: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long, default_value = "pre_split")]
    pub layout: String,
    /// Images per class; split 80/20 in the pre_split layout.
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    /// Use the public dataset's exact per-class split counts instead.
    #[arg(long)]
    pub published_counts: bool,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run(args: Vec<String>) -> i32 {
    let (args, overrides) = crate::config::extract_overrides(args);
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Prepare(a) => prepare(a, &overrides),
        Command::Train(a) => cmd_train(a, &overrides),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => report(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } => EXIT_NUMERIC,
        Error::Config(_)
        | Error::Argument(_)
        | Error::Precondition(_)
        | Error::Parse { .. }
        | Error::Schema { .. }
        | Error::UnknownBackbone { .. }
        | Error::Incompatible { .. } => EXIT_USAGE,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn prepare(a: PrepareArgs, overrides: &[(String, String)]) -> Result<i32> {
    let mut overrides = overrides.to_vec();
    let mut set = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            overrides.push((k.to_owned(), v));
        }
    };
    set("dataset.root", a.root.map(|p| toml_string(&p.to_string_lossy())));
    set("dataset.layout", a.layout.map(|l| toml_string(&l)));
    set("dataset.split_ratio", a.ratio.map(|r| r.to_string()));
    set("dataset.seed", a.seed.map(|s| s.to_string()));
    let config = RunConfig::load(a.config.as_deref(), &overrides)?;
    let layout = config.layout()?;
    let ds = &config.dataset;

    let scanned = scan_dataset(&ds.root, layout)?;
    let manifest = if scanned.is_unassigned() || a.resplit {
        stratified_split(&scanned, ds.split_ratio, ds.seed, a.resplit)?
    } else {
        scanned
    };
    let out = a.out.unwrap_or_else(|| ds.manifest.clone());
    save_manifest(&manifest, &out)?;

    let count = |s| manifest.split_records(s).count();
    println!(
        "manifest {}: {} images ({} train, {} val)",
        out.display(),
        manifest.records.len(),
        count(Split::Train),
        count(Split::Val)
    );
    if manifest.warning_count() > 0 {
        for p in &manifest.skipped {
            eprintln!("warning: skipped unreadable file {}", p.display());
        }
        for c in &manifest.empty_classes {
            eprintln!("warning: class {c} has no images");
        }
    }
    if a.expect_paper {
        let report = verify_counts(&manifest, &ExpectedCounts::kaggle_brain_tumor());
        println!("{report}");
        if !report.all_match() {
            eprintln!("verification: {} class(es) differ from the expected counts", report.mismatches().len());
            if a.strict {
                return Ok(EXIT_VERIFY);
            }
        }
    }
    Ok(EXIT_OK)
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_owned()).to_string()
}

pub fn default_run_dir(config: &RunConfig) -> PathBuf {
    let scope = config.model.scope.as_str();
    config
        .output
        .run_root
        .join(format!("{}-{}-seed{}", config.model.backbone, scope, config.train.seed))
}

fn cmd_train(a: TrainArgs, overrides: &[(String, String)]) -> Result<i32> {
    let mut overrides = overrides.to_vec();
    if let Some(b) = a.backbone {
        overrides.push(("model.backbone".into(), toml_string(&b)));
    }
    if let Some(s) = a.seed {
        overrides.push(("dataset.seed".into(), s.to_string()));
        overrides.push(("train.seed".into(), s.to_string()));
    }
    if let Some(m) = &a.manifest {
        overrides.push(("dataset.manifest".into(), toml_string(&m.to_string_lossy())));
    }
    let config = RunConfig::load(a.config.as_deref(), &overrides)?;
    let run_dir = a.run_dir.unwrap_or_else(|| default_run_dir(&config));
    if run_dir.join("history.csv").exists() {
        return Err(Error::Config(format!("{} already holds a training run", run_dir.display())));
    }
    let manifest = load_manifest(&config.dataset.manifest)?;
    let train_set = FileSource::from_manifest(&manifest, Split::Train);
    let val_set = FileSource::from_manifest(&manifest, Split::Val);
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Precondition(format!(
            "manifest {} needs train and val images (found {} / {}); run prepare first",
            config.dataset.manifest.display(),
            train_set.len(),
            val_set.len()
        )));
    }

    fs::create_dir_all(&run_dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", run_dir.display())))?;
    let snapshot = run_dir.join("config.snapshot");
    fs::write(&snapshot, config.to_toml()?).map_err(|e| Error::Config(format!("cannot write {}: {e}", snapshot.display())))?;

    let backbone = config.backbone_spec()?;
    let mut model = build_model(
        backbone.clone(),
        config.head_spec(),
        config.model.scope,
        &BuildOptions {
            seed: config.train.seed,
            cache_dir: None,
        },
    )?;
    if backbone.weights == WeightInit::Random && config.model.calibration_images > 0 {
        let n = calibrate_batch_norm(&mut model, &train_set, config.model.calibration_images, config.train.eval_batch_size)?;
        println!("calibrated batch-norm statistics on {n} training images");
    }
    println!(
        "training {} ({}) on {} train / {} val images into {}",
        config.model.backbone,
        config.model.scope.as_str(),
        train_set.len(),
        val_set.len(),
        run_dir.display()
    );
    let history = train(&mut model, &train_set, &val_set, &config.train, &config.augment, &run_dir, &mut |m| {
        println!(
            "epoch {:>3}  train_loss {:.4}  train_acc {:.4}  val_loss {:.4}  val_acc {:.4}  ({:.1}s)",
            m.epoch, m.train_loss, m.train_accuracy, m.val_loss, m.val_accuracy, m.wall_seconds
        );
    })?;
    println!(
        "done: {} epochs{}, best epoch {}, checkpoint {}",
        history.epochs.len(),
        if history.stopped_early { " (early stop)" } else { "" },
        history.best_epoch,
        history.checkpoint_path.display()
    );
    Ok(EXIT_OK)
}

fn read_snapshot(run_dir: &Path) -> Option<RunConfig> {
    let path = run_dir.join("config.snapshot");
    path.exists().then(|| RunConfig::load(Some(&path), &[]).ok()).flatten()
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<i32> {
    let checkpoint = a.run_dir.join("best.ckpt");
    if !checkpoint.is_file() {
        return Err(Error::Config(format!("no checkpoint at {}", checkpoint.display())));
    }
    let split: Split = a.split.parse().map_err(Error::Argument)?;
    let manifest_path = match a.manifest {
        Some(m) => m,
        None => read_snapshot(&a.run_dir)
            .map(|c| c.dataset.manifest)
            .ok_or_else(|| Error::Config("pass --manifest; the run has no readable config.snapshot".into()))?,
    };
    let manifest = load_manifest(&manifest_path)?;
    let report = evaluate(&checkpoint, &manifest, split, a.batch_size)?;
    let out = a.out.unwrap_or_else(|| a.run_dir.join("report.toml"));
    write_report(&report, &out)?;
    let measured = if split == Split::Train { report.train } else { report.val }.expect("evaluated split is filled");
    println!("{} on {split}: accuracy {:.4}, loss {:.4}", report.model_id, measured.accuracy, measured.loss);
    println!("confusion (rows true, columns predicted):");
    for row in &report.confusion.counts {
        println!("  {}", row.iter().map(|c| format!("{c:>6}")).collect::<String>());
    }
    for c in &report.per_class {
        println!("  {:<12} precision {:.4}  recall {:.4}  f1 {:.4}", c.class, c.precision, c.recall, c.f1);
    }
    for w in report.undefined_metrics() {
        eprintln!("warning: {w} is 0/0, reported as 0");
    }
    println!("report written to {}", out.display());
    Ok(EXIT_OK)
}

/// Model id for a run: snapshot backbone, else checkpoint sidecar, else the
/// directory name.
fn run_model_id(run_dir: &Path) -> String {
    let key = read_snapshot(run_dir)
        .map(|c| c.model.backbone)
        .or_else(|| read_sidecar(&run_dir.join("best.ckpt")).ok().map(|m| m.backbone));
    match key.as_deref().map(BackboneId::lookup) {
        Some(Ok(id)) => id.info().display_name.to_owned(),
        _ => run_dir.file_name().map_or_else(|| run_dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
    }
}

pub fn collect_run(run_dir: &Path) -> Result<(EvaluationReport, TrainingHistory)> {
    let history_path = run_dir.join("history.csv");
    if !history_path.is_file() {
        return Err(Error::Config(format!("{} has no history.csv", run_dir.display())));
    }
    let history = TrainingHistory::from_epochs(read_history_csv(&history_path)?, false, run_dir.join("best.ckpt"));
    let report_path = run_dir.join("report.toml");
    let report = if report_path.is_file() {
        mri_bench_core::eval::read_report(&report_path)?
    } else {
        let mut r = EvaluationReport::from_metrics(
            run_model_id(run_dir),
            history.epochs.len(),
            Default::default(),
            Default::default(),
        );
        r.train = None;
        r.val = None;
        r
    };
    Ok((report, history))
}

fn report(a: ReportArgs) -> Result<i32> {
    let mut reports = Vec::new();
    let mut histories = Vec::new();
    for run in &a.runs {
        let (r, h) = collect_run(run)?;
        reports.push(r);
        histories.push(h);
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let rows = results_rows(&reports, &histories)?;
    let table = a.out.join("results.csv");
    fs::write(&table, format_results_table(&rows)).map_err(|e| Error::io(&table, e))?;
    print!("{}", format_results_table(&rows));
    if reports.is_empty() {
        eprintln!("warning: no runs given; wrote a header-only table");
        return Ok(EXIT_OK);
    }
    let series: Vec<(&str, &TrainingHistory)> = rows.iter().map(|r| r.model.as_str()).zip(histories.iter()).collect();
    for metric in [Metric::Accuracy, Metric::Loss] {
        for split in [Split::Train, Split::Val] {
            plot_curves(&series, metric, split, &a.out)?;
        }
    }
    let ranked_reports: Vec<EvaluationReport> = rows
        .iter()
        .map(|r| {
            EvaluationReport::from_metrics(
                r.model.clone(),
                r.epochs,
                mri_bench_core::eval::SplitMetrics { accuracy: r.train_accuracy, loss: r.train_loss },
                mri_bench_core::eval::SplitMetrics { accuracy: r.val_accuracy, loss: r.val_loss },
            )
        })
        .collect();
    println!("ranking (val accuracy, then val loss): {}", summarize_best(&ranked_reports).join(" > "));
    println!("table and plots written to {}", a.out.display());
    Ok(EXIT_OK)
}

/// `(train, val)` counts of the public dataset's shipped split.
pub fn published_counts() -> ClassCounts {
    ExpectedCounts::kaggle_brain_tumor().per_class.map(|(_, train, val)| (train, val))
}

fn synth(a: SynthArgs) -> Result<i32> {
    let layout: Layout = a.layout.parse().map_err(Error::Argument)?;
    let counts = if a.published_counts {
        published_counts()
    } else {
        let train = mri_bench_core::dataset::train_count(0.8, a.per_class);
        [(train, a.per_class - train); 4]
    };
    let n = write_phantom_dataset(&a.root, layout, &counts, a.size, a.seed)?;
    println!("wrote {n} phantom images under {}", a.root.display());
    Ok(EXIT_OK)
}
