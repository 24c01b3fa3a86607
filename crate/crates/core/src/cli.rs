//! Command-line front end: `gen-data`, `train`, `eval`, `analyze`, `grad-check`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gradcheck::{self, Group};
use crate::graphgen::{Dataset, DatasetSpec, Variant, STATS_FILE, TEST_FILE, TRAIN_FILE};
use crate::metrics::{self, EvalRecord, EvalReport, ScoreRule};
use crate::model::AnyModel;
use crate::reasonet::ModelKind;
use crate::training::{append_metrics, BaselineMode, OptimizerKind, RewardRescale, TrainConfig, Trainer};

/// Relative output paths are resolved under this directory when it is set.
pub const OUTPUT_ROOT_ENV: &str = "REASONET_OUTPUT_DIR";

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const RECORDS_FILE: &str = "records.csv";
pub const HISTOGRAM_FILE: &str = "termination_histogram.csv";
pub const BFS_MATRIX_FILE: &str = "bfs_matrix.csv";

#[derive(Debug, Parser)]
#[command(name = "reasonet", version, about = "Graph reachability with a learned-termination reasoning network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/test instance files and a statistics report.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a report and per-instance records.
    Eval(EvalArgs),
    /// Turn evaluation records into termination-step tables.
    Analyze(AnalyzeArgs),
    /// Compare backpropagated gradients with finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value = "small")]
    pub variant: Variant,
    #[arg(long, default_value_t = 30_000)]
    pub train: usize,
    #[arg(long, default_value_t = 3_000)]
    pub test: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Output directory [default: data/<variant>-seed<seed>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON file with any subset of the training configuration keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory [default: runs/<model>-seed<seed>].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long = "tmax")]
    pub t_max: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub baseline_mode: Option<BaselineMode>,
    #[arg(long)]
    pub baseline_lambda: Option<f64>,
    #[arg(long)]
    pub reward_rescale: Option<RewardRescale>,
    /// Clip every gradient entry to `[-c, c]`.
    #[arg(long = "clip")]
    pub clip_abs: Option<f64>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub encoder_hidden: Option<usize>,
    #[arg(long)]
    pub controller_hidden: Option<usize>,
    #[arg(long)]
    pub attention_dim: Option<usize>,
    #[arg(long)]
    pub reader_hidden: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: SplitArg,
    /// Score fed to the AUC metrics.
    #[arg(long, default_value = "selected")]
    pub score: ScoreRuleArg,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Output directory [default: the checkpoint's directory].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Records CSV written by `eval`.
    #[arg(long)]
    pub records: PathBuf,
    /// Number of termination-step columns [default: from the neighbouring
    /// report, else the largest step in the records].
    #[arg(long = "tmax")]
    pub t_max: Option<usize>,
    /// Output directory [default: the records' directory].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Print every check, not only the per-group summary.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ScoreRuleArg {
    Selected,
    Expected,
}

impl From<ScoreRuleArg> for ScoreRule {
    fn from(a: ScoreRuleArg) -> Self {
        match a {
            ScoreRuleArg::Selected => ScoreRule::Selected,
            ScoreRuleArg::Expected => ScoreRule::Expected,
        }
    }
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub created_unix: u64,
    pub config: serde_json::Value,
    /// SHA-256 of each input file, keyed by path.
    pub datasets: BTreeMap<String, String>,
    pub checkpoint_hash: Option<String>,
    pub timings: BTreeMap<String, f64>,
    pub metrics: serde_json::Value,
}

impl RunManifest {
    pub fn append(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{}", serde_json::to_string(self)?).map_err(|e| Error::io(&path, e))
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Resolves a relative output path under `$REASONET_OUTPUT_DIR` when set.
pub fn output_path(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join(STATS_FILE).is_file() {
        return Err(Error::io(
            dir.join(STATS_FILE),
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory has no statistics file"),
        ));
    }
    Ok(Dataset::read(dir)?)
}

fn dataset_checksums(dir: &Path, files: &[&str]) -> Result<BTreeMap<String, String>> {
    files
        .iter()
        .map(|f| {
            let path = dir.join(f);
            Ok((path.display().to_string(), file_sha256(&path)?))
        })
        .collect()
}

pub fn gen_data(args: &GenDataArgs) -> Result<serde_json::Value> {
    let spec = DatasetSpec::new(args.variant, args.train, args.test, args.seed);
    spec.validate()?;
    let out = output_path(
        &args
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("data/{}-seed{}", args.variant, args.seed))),
    );
    let stats = Dataset::generate(&spec)?.write(&out)?;
    eprintln!("wrote {}", out.display());
    Ok(serde_json::to_value(stats)?)
}

/// Defaults, then the config file, then flags.
pub fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = args.$field.clone() {
                cfg.$field = v;
            }
        )*};
    }
    set!(
        model,
        t_max,
        epochs,
        seed,
        batch_size,
        optimizer,
        learning_rate,
        baseline_mode,
        baseline_lambda,
        reward_rescale,
        embedding_dim,
        encoder_hidden,
        controller_hidden,
        attention_dim,
        reader_hidden,
        gamma
    );
    if args.clip_abs.is_some() {
        cfg.clip_abs = args.clip_abs;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(args: &TrainArgs) -> Result<serde_json::Value> {
    let cfg = resolve_train_config(args)?;
    let data = read_dataset(&args.data)?;
    let out = output_path(
        &args
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.model, cfg.seed))),
    );
    create_dir(&out)?;
    write_file(&out.join(CONFIG_FILE), &(serde_json::to_string_pretty(&cfg)? + "\n"))?;
    let metrics_path = out.join(METRICS_FILE);
    if metrics_path.exists() {
        std::fs::remove_file(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    }

    let start = Instant::now();
    let mut trainer = Trainer::new(cfg.clone(), data.spec.num_nodes)?;
    let mut timings = BTreeMap::new();
    let mut last = None;
    for _ in 0..cfg.epochs {
        let m = trainer.train_epoch(&data.train)?;
        append_metrics(&metrics_path, &m)?;
        eprintln!(
            "epoch {:>3}  mean_J {:.4}  loss {:+.4}  train_acc {:.4}  {:.1}s",
            m.epoch, m.mean_j, m.loss, m.train_acc, m.wall_seconds
        );
        timings.insert(format!("epoch_{:03}", m.epoch), m.wall_seconds);
        last = Some(m);
    }
    let hash = trainer.model.save(&out.join(CHECKPOINT_FILE))?;
    timings.insert("total".into(), start.elapsed().as_secs_f64());
    let summary = serde_json::json!({
        "checkpoint": out.join(CHECKPOINT_FILE).display().to_string(),
        "checkpoint_hash": hash,
        "final_epoch": last,
    });
    RunManifest {
        command: "train".into(),
        created_unix: now_unix(),
        config: serde_json::to_value(&cfg)?,
        datasets: dataset_checksums(&args.data, &[TRAIN_FILE, STATS_FILE])?,
        checkpoint_hash: Some(hash),
        timings,
        metrics: serde_json::to_value(&last)?,
    }
    .append(&out)?;
    Ok(summary)
}

/// Evaluation records for every instance of a split.
pub fn evaluate(model: &AnyModel, instances: &[crate::graphgen::GraphInstance], batch_size: usize) -> Result<Vec<EvalRecord>> {
    let preds = model.predict(instances, batch_size)?;
    Ok(instances
        .iter()
        .zip(&preds)
        .enumerate()
        .map(|(i, (inst, p))| EvalRecord::from_prediction(i, inst, p))
        .collect())
}

pub fn eval(args: &EvalArgs) -> Result<serde_json::Value> {
    let start = Instant::now();
    let model = AnyModel::load(&args.checkpoint)?;
    let data = read_dataset(&args.data)?;
    if data.spec.num_nodes != model.config().num_nodes {
        return Err(Error::Config(format!(
            "checkpoint expects {} nodes, dataset has {}",
            model.config().num_nodes,
            data.spec.num_nodes
        )));
    }
    let (instances, file) = match args.split {
        SplitArg::Train => (&data.train, TRAIN_FILE),
        SplitArg::Test => (&data.test, TEST_FILE),
    };
    let records = evaluate(&model, instances, args.batch_size)?;
    let report = EvalReport::compute(&records, model.config().t_max, args.score.into())?;
    let out = match &args.out {
        Some(dir) => output_path(dir),
        None => args.checkpoint.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    create_dir(&out)?;
    write_file(&out.join(REPORT_FILE), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    metrics::write_records(&out.join(RECORDS_FILE), &records)?;
    let mut timings = BTreeMap::new();
    timings.insert("total".into(), start.elapsed().as_secs_f64());
    RunManifest {
        command: "eval".into(),
        created_unix: now_unix(),
        config: serde_json::json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "model": model.config(),
            "split": file,
            "score": report.score_rule,
            "batch_size": args.batch_size,
        }),
        datasets: dataset_checksums(&args.data, &[file, STATS_FILE])?,
        checkpoint_hash: Some(crate::checkpoint::content_hash(&model.to_bytes())),
        timings,
        metrics: serde_json::json!({
            "accuracy": report.accuracy,
            "roc_auc": report.roc_auc,
            "pr_auc": report.pr_auc,
        }),
    }
    .append(&out)?;
    Ok(serde_json::to_value(&report)?)
}

pub fn analyze(args: &AnalyzeArgs) -> Result<serde_json::Value> {
    let records = metrics::read_records(&args.records)?;
    if records.is_empty() {
        return Err(Error::Metric(format!("{} has no records", args.records.display())));
    }
    let dir = args.records.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let from_report = || -> Option<usize> {
        let text = std::fs::read_to_string(dir.join(REPORT_FILE)).ok()?;
        let report: EvalReport = serde_json::from_str(&text).ok()?;
        Some(report.histogram.len())
    };
    let t_max = args
        .t_max
        .or_else(from_report)
        .unwrap_or_else(|| records.iter().map(|r| r.step).max().unwrap_or(1));
    let histogram = metrics::termination_histogram(&records, t_max)?;
    let matrix = metrics::bfs_correlation(&records, t_max)?;
    let out = match &args.out {
        Some(dir) => output_path(dir),
        None => dir,
    };
    create_dir(&out)?;
    write_file(&out.join(HISTOGRAM_FILE), &metrics::histogram_csv(&histogram))?;
    write_file(&out.join(BFS_MATRIX_FILE), &metrics::bfs_matrix_csv(&matrix))?;
    let means: BTreeMap<String, Option<f64>> = matrix
        .bfs_steps
        .iter()
        .map(|&b| (b.to_string(), matrix.mean_step(b)))
        .collect();
    Ok(serde_json::json!({
        "t_max": t_max,
        "histogram": histogram,
        "mean_step_by_bfs": means,
        "last_step_fraction": histogram[t_max - 1] as f64 / records.len() as f64,
    }))
}

pub fn grad_check(args: &GradCheckArgs) -> Result<serde_json::Value> {
    let report = gradcheck::run(args.seed, args.tolerance)?;
    for g in Group::ALL {
        let worst = report.worst(g);
        let verdict = if worst <= args.tolerance { "PASS" } else { "FAIL" };
        eprintln!("{:<12} worst relative error {worst:.3e}  {verdict}", g.as_str());
        if args.verbose {
            for c in report.checks.iter().filter(|c| c.group == g) {
                eprintln!("    {:<28} {:.3e} over {} entries", c.name, c.worst_rel_error, c.entries);
            }
        }
    }
    if !report.passed() {
        let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
        return Err(Error::GradCheck(format!(
            "{} exceeded {:e}",
            names.join(", "),
            args.tolerance
        )));
    }
    Ok(serde_json::to_value(&report)?)
}

pub fn run(cli: &Cli) -> Result<serde_json::Value> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::GradCheck(a) => grad_check(a),
    }
}

/// Parses the process arguments, runs the command and prints its JSON
/// summary. Exit status 0 on success, 2 for invalid input, 3 for numeric
/// failures and 4 for I/O errors.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(summary) => {
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
