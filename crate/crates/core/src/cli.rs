//! The `lusnet` command line: dataset prep, training, inference, serving
//! and the benchmark harness.
//!
//! Machine-readable output is one JSON document on stdout; logs go to
//! stderr. Exit codes: 0 success, 1 usage, 2 data, 3 internal.

use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::arch::{parse_arch, NetworkSpec, DEFAULT_ARCH};
use crate::bench::bench_forward;
use crate::classifier::{ClassProbabilities, Classifier};
use crate::dataset::{self, DatasetManifest, Label, Split, SplitFractions};
use crate::imaging::AugmentConfig;
use crate::kernels::KernelMode;
use crate::network::{init_params, Network};
use crate::service::{Server, ServiceConfig, DEFAULT_MAX_CONCURRENT};
use crate::training::{self, TrainConfig, TrainError};
use crate::weights::{self, WeightStore};

pub const DEFAULT_BIND: &str = "127.0.0.1:7878";
pub const DEFAULT_ITERS: usize = 10;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    fn data(e: impl Display) -> Self {
        CliError::Data(e.to_string())
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::BadConfig(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

type CliResult = Result<Value, CliError>;

#[derive(Debug, Parser)]
#[command(name = "lusnet", version, about = "Lung-ultrasound covid/healthy CNN: data prep, training, inference, serving, benchmark")]
struct Cli {
    /// JSON file with defaults for any flag (flags take precedence).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Index <data-root>/{covid,healthy}/*.pgm into a JSONL manifest.
    Manifest(ManifestArgs),
    /// Assign stratified train/val/test splits (70/15/15).
    Split(SplitArgs),
    /// Write ten images (original + nine variants) per frame.
    Augment(AugmentArgs),
    /// Write He-initialized weights for an architecture.
    Init(InitArgs),
    /// SGD with momentum; --transfer trains only the dense head.
    Train(TrainArgs),
    /// Accuracy, sensitivity, specificity and confusion on a split.
    Evaluate(EvaluateArgs),
    /// Classify one PGM frame.
    Classify(ClassifyArgs),
    /// Per-layer latency and cost report. Costs are in MACs (1 MAC = 2 FLOP).
    Bench(BenchArgs),
    /// List tensors with dims and a CRC32 fingerprint.
    WeightsInfo(WeightsInfoArgs),
    /// Run the NDJSON inference server.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct ArchArg {
    /// Architecture string; defaults to the 13-conv network.
    #[arg(long)]
    arch: Option<String>,
}

#[derive(Debug, Args)]
struct ModeArg {
    /// Kernel implementation: reference or fast.
    #[arg(long)]
    mode: Option<KernelMode>,
}

#[derive(Debug, Args)]
struct ManifestArgs {
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Write the manifest here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Used when no manifest is given.
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; receives covid/, healthy/ and manifest.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InitArgs {
    #[command(flatten)]
    arch: ArchArg,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    arch: ArchArg,
    /// Starting weights; He-initialized from --seed when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    momentum: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    transfer: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    arch: ArchArg,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    split: Split,
    #[command(flatten)]
    mode: ModeArg,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    #[command(flatten)]
    arch: ArchArg,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[command(flatten)]
    mode: ModeArg,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    arch: ArchArg,
    /// Weights to time with; He-initialized from --seed when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    mode: ModeArg,
}

#[derive(Debug, Args)]
struct WeightsInfoArgs {
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[command(flatten)]
    arch: ArchArg,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Listen address; port 0 picks a free port.
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    max_concurrent: Option<usize>,
    #[command(flatten)]
    mode: ModeArg,
}

/// Values from `--config`; every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct FileConfig {
    arch: Option<String>,
    weights: Option<PathBuf>,
    image: Option<PathBuf>,
    data_root: Option<PathBuf>,
    manifest: Option<PathBuf>,
    seed: Option<u64>,
    epochs: Option<usize>,
    lr: Option<f32>,
    momentum: Option<f32>,
    batch_size: Option<usize>,
    transfer: Option<bool>,
    mode: Option<KernelMode>,
    iters: Option<usize>,
    bind: Option<String>,
    max_concurrent: Option<usize>,
    out: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn spec_from(flag: Option<String>, cfg: &FileConfig) -> Result<NetworkSpec, CliError> {
    let text = flag.or_else(|| cfg.arch.clone()).unwrap_or_else(|| DEFAULT_ARCH.to_string());
    parse_arch(&text).map_err(|e| CliError::Usage(format!("--arch: {e}")))
}

fn mode_from(flag: Option<KernelMode>, cfg: &FileConfig) -> KernelMode {
    flag.or(cfg.mode).unwrap_or_default()
}

fn load_weights(path: &Path) -> Result<WeightStore, CliError> {
    weights::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    DatasetManifest::load(path).map_err(CliError::data)
}

fn counts(m: &DatasetManifest) -> Value {
    let mut by_split = serde_json::Map::new();
    for s in Split::ALL {
        let c = m.count(Label::Covid, Some(s));
        let h = m.count(Label::Healthy, Some(s));
        if c + h > 0 {
            by_split.insert(s.as_str().into(), json!({"covid": c, "healthy": h}));
        }
    }
    json!({
        "records": m.len(),
        "covid": m.count(Label::Covid, None),
        "healthy": m.count(Label::Healthy, None),
        "splits": by_split,
        "warnings": m.warnings,
    })
}

fn emit_manifest(m: &DatasetManifest, out: Option<&Path>) -> CliResult {
    match out {
        Some(path) => {
            m.save(path).map_err(CliError::data)?;
            let mut v = counts(m);
            v["out"] = json!(path);
            Ok(v)
        }
        None => {
            print!("{}", m.to_jsonl());
            Ok(Value::Null)
        }
    }
}

fn cmd_manifest(a: ManifestArgs, cfg: &FileConfig) -> CliResult {
    let root = require(a.data_root.or(cfg.data_root.clone()), "data-root")?;
    let m = dataset::build_manifest(&root).map_err(CliError::data)?;
    emit_manifest(&m, a.out.or(cfg.out.clone()).as_deref())
}

fn cmd_split(a: SplitArgs, cfg: &FileConfig) -> CliResult {
    let path = require(a.manifest.or(cfg.manifest.clone()), "manifest")?;
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    let m = dataset::split(&load_manifest(&path)?, &SplitFractions::default(), seed).map_err(CliError::data)?;
    emit_manifest(&m, a.out.or(cfg.out.clone()).as_deref())
}

fn cmd_augment(a: AugmentArgs, cfg: &FileConfig) -> CliResult {
    let out = require(a.out.or(cfg.out.clone()), "out")?;
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    let input = match (a.manifest.or(cfg.manifest.clone()), a.data_root.or(cfg.data_root.clone())) {
        (Some(path), _) => load_manifest(&path)?,
        (None, Some(root)) => dataset::build_manifest(&root).map_err(CliError::data)?,
        (None, None) => return Err(CliError::Usage("--manifest or --data-root is required".into())),
    };
    let m = dataset::augment_dataset(&input, &out, seed, &AugmentConfig::default()).map_err(CliError::data)?;
    let manifest_path = out.join("manifest.jsonl");
    m.save(&manifest_path).map_err(CliError::data)?;
    let mut v = counts(&m);
    v["input_records"] = json!(input.len());
    v["out"] = json!(manifest_path);
    Ok(v)
}

fn cmd_init(a: InitArgs, cfg: &FileConfig) -> CliResult {
    let spec = spec_from(a.arch.arch, cfg)?;
    let out = require(a.out.or(cfg.out.clone()), "out")?;
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    let store = init_params(&spec, seed).map_err(CliError::data)?;
    let bytes = weights::save(&store, &out).map_err(CliError::data)?;
    Ok(json!({"out": out, "tensors": store.len(), "parameters": store.scalar_count(), "bytes": bytes}))
}

fn cmd_train(a: TrainArgs, cfg: &FileConfig) -> CliResult {
    let spec = spec_from(a.arch.arch, cfg)?;
    let manifest = load_manifest(&require(a.manifest.or(cfg.manifest.clone()), "manifest")?)?;
    let out = require(a.out.or(cfg.out.clone()), "out")?;
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        learning_rate: a.lr.or(cfg.lr).unwrap_or(defaults.learning_rate),
        momentum: a.momentum.or(cfg.momentum).unwrap_or(defaults.momentum),
        batch_size: a.batch_size.or(cfg.batch_size).unwrap_or(defaults.batch_size),
        epochs: a.epochs.or(cfg.epochs).unwrap_or(defaults.epochs),
        transfer_mode: a.transfer || cfg.transfer.unwrap_or(defaults.transfer_mode),
        seed: a.seed.or(cfg.seed).unwrap_or(defaults.seed),
    };
    config.validate()?;
    let start = match a.weights.or(cfg.weights.clone()) {
        Some(path) => load_weights(&path)?,
        None => init_params(&spec, config.seed).map_err(CliError::data)?,
    };
    let outcome = training::train(&spec, start, &manifest, &config, |r| {
        log::info!(
            "epoch {}: loss {:.4} train_acc {:.3} val_acc {:.3}",
            r.epoch,
            r.train_loss,
            r.train_acc,
            r.val_acc
        );
    })?;
    weights::save(&outcome.weights, &out).map_err(CliError::data)?;
    Ok(json!({
        "out": out,
        "config": config,
        "initial_val_acc": outcome.initial_val_acc,
        "history": outcome.history,
        "frozen": outcome.weights.frozen_names(),
    }))
}

fn cmd_evaluate(a: EvaluateArgs, cfg: &FileConfig) -> CliResult {
    let spec = spec_from(a.arch.arch, cfg)?;
    let store = load_weights(&require(a.weights.or(cfg.weights.clone()), "weights")?)?;
    let manifest = load_manifest(&require(a.manifest.or(cfg.manifest.clone()), "manifest")?)?;
    let m = training::evaluate(&spec, &store, &manifest, a.split, mode_from(a.mode.mode, cfg))?;
    Ok(json!({"split": a.split.as_str(), "samples": m.total(), "metrics": m}))
}

fn classifier(arch: Option<String>, weights: Option<PathBuf>, mode: KernelMode, cfg: &FileConfig) -> Result<Classifier, CliError> {
    let spec = spec_from(arch, cfg)?;
    let store = load_weights(&require(weights.or(cfg.weights.clone()), "weights")?)?;
    Classifier::new(spec, store, mode).map_err(CliError::data)
}

fn cmd_classify(a: ClassifyArgs, cfg: &FileConfig) -> CliResult {
    let c = classifier(a.arch.arch, a.weights, mode_from(a.mode.mode, cfg), cfg)?;
    let path = require(a.image.or(cfg.image.clone()), "image")?;
    let bytes = std::fs::read(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let p = c
        .classify_pgm(&bytes)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(json!({"label": p.label, "probabilities": ClassProbabilities::from_prediction(&p)}))
}

fn cmd_bench(a: BenchArgs, cfg: &FileConfig) -> CliResult {
    let spec = spec_from(a.arch.arch, cfg)?;
    let iters = a.iters.or(cfg.iters).unwrap_or(DEFAULT_ITERS);
    if iters == 0 {
        return Err(CliError::Usage("--iters must be at least 1".into()));
    }
    let store = match a.weights.or(cfg.weights.clone()) {
        Some(path) => load_weights(&path)?,
        None => init_params(&spec, a.seed.or(cfg.seed).unwrap_or(0)).map_err(CliError::data)?,
    };
    let report = bench_forward(&spec, &store, iters, mode_from(a.mode.mode, cfg)).map_err(CliError::data)?;
    serde_json::to_value(report).map_err(|e| CliError::Internal(e.to_string()))
}

fn cmd_weights_info(a: WeightsInfoArgs, cfg: &FileConfig) -> CliResult {
    let path = require(a.weights.or(cfg.weights.clone()), "weights")?;
    let store = load_weights(&path)?;
    let tensors: Vec<Value> = store
        .iter()
        .map(|(name, t)| {
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            json!({
                "name": name,
                "dims": t.dims(),
                "scalars": t.len(),
                "crc32": format!("{:08x}", crc32fast::hash(&bytes)),
            })
        })
        .collect();
    Ok(json!({
        "path": path,
        "tensors": tensors,
        "tensor_count": store.len(),
        "scalars": store.scalar_count(),
    }))
}

fn cmd_serve(a: ServeArgs, cfg: &FileConfig) -> CliResult {
    let c = classifier(a.arch.arch, a.weights, mode_from(a.mode.mode, cfg), cfg)?;
    let bind = a.bind.or(cfg.bind.clone()).unwrap_or_else(|| DEFAULT_BIND.to_string());
    let max_concurrent = a.max_concurrent.or(cfg.max_concurrent).unwrap_or(DEFAULT_MAX_CONCURRENT);
    if max_concurrent == 0 {
        return Err(CliError::Usage("--max-concurrent must be at least 1".into()));
    }
    let layers = Network::layers(c.network()).len();
    let server = Server::bind(
        bind.as_str(),
        c,
        ServiceConfig {
            max_concurrent,
            ..ServiceConfig::default()
        },
    )
    .map_err(|e| CliError::Data(format!("bind {bind}: {e}")))?;
    let addr = server.local_addr().map_err(|e| CliError::Internal(e.to_string()))?;
    // Announce the bound address first so callers using port 0 can connect.
    print_json(&json!({"listening": addr.to_string(), "layers": layers, "max_concurrent": max_concurrent}));
    server.run().map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(Value::Null)
}

fn print_json(v: &Value) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{v}");
    let _ = out.flush();
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(Value::Null) => 0,
        Ok(v) => {
            print_json(&v);
            0
        }
        Err(e) => {
            eprintln!("lusnet: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> CliResult {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Manifest(a) => cmd_manifest(a, &cfg),
        Command::Split(a) => cmd_split(a, &cfg),
        Command::Augment(a) => cmd_augment(a, &cfg),
        Command::Init(a) => cmd_init(a, &cfg),
        Command::Train(a) => cmd_train(a, &cfg),
        Command::Evaluate(a) => cmd_evaluate(a, &cfg),
        Command::Classify(a) => cmd_classify(a, &cfg),
        Command::Bench(a) => cmd_bench(a, &cfg),
        Command::WeightsInfo(a) => cmd_weights_info(a, &cfg),
        Command::Serve(a) => cmd_serve(a, &cfg),
    }
}
