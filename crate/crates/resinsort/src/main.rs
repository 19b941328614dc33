//! Command-line entry point: synthetic data generation, training, accuracy
//! evaluation, and novelty detection, each writing reproducible artifacts
//! under its output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use resinsort::data::{
    compute_stats, load_dataset, split_dataset, synth_generate, DatasetManifest, Split, StatsScope,
};
use resinsort::error::{Error, Result};
use resinsort::eval::{
    build_index, build_index_subset, knn_report, knn_report_split, one_shot_accuracy, EvalConfig,
    Polarity,
};
use resinsort::novelty::{
    confusion, default_x_grid, detect_outliers, export_projection_csv, fit_lda, fit_pca,
    tune_params, ConfusionCounts, ProjectedItem, ProjectionKind, ProjectionModel,
};
use resinsort::trainer::{load_checkpoint, save_checkpoint, train, NetKind, Profile, TrainConfig};

const LOCK_FILE: &str = "config.lock.json";

#[derive(Parser)]
#[command(
    name = "resinsort",
    version,
    about = "Metric-learning toolkit for resin-code image classification and novelty detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape/color dataset of PPM images.
    Synth(SynthArgs),
    /// Train a Siamese or triplet embedding network.
    Train(TrainArgs),
    /// Evaluate a checkpoint with one-shot episodes or KNN.
    Eval(EvalArgs),
    /// Detect images of a held-out class as novel material.
    Novelty(NoveltyArgs),
}

// ---------------------------------------------------------------------------
// Flag enums (mapped onto the library's serde enums)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Siamese,
    Triplet,
}

impl From<KindArg> for NetKind {
    fn from(v: KindArg) -> Self {
        match v {
            KindArg::Siamese => NetKind::Siamese,
            KindArg::Triplet => NetKind::Triplet,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProfileArg {
    Full,
    Mini,
}

impl From<ProfileArg> for Profile {
    fn from(v: ProfileArg) -> Self {
        match v {
            ProfileArg::Full => Profile::Full,
            ProfileArg::Mini => Profile::Mini,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StatsScopeArg {
    Train,
    All,
}

impl From<StatsScopeArg> for StatsScope {
    fn from(v: StatsScopeArg) -> Self {
        match v {
            StatsScopeArg::Train => StatsScope::Train,
            StatsScopeArg::All => StatsScope::All,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolarityArg {
    GreatestIsSame,
    LeastIsSame,
}

impl From<PolarityArg> for Polarity {
    fn from(v: PolarityArg) -> Self {
        match v {
            PolarityArg::GreatestIsSame => Polarity::GreatestIsSame,
            PolarityArg::LeastIsSame => Polarity::LeastIsSame,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Pca,
    Lda,
}

impl From<MethodArg> for ProjectionKind {
    fn from(v: MethodArg) -> Self {
        match v {
            MethodArg::Pca => ProjectionKind::Pca,
            MethodArg::Lda => ProjectionKind::Lda,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Protocol {
    OneShot,
    Knn,
}

/// Which rows feed the KNN index: the whole dataset (queries vote among all
/// other images, minus themselves) or the training split only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum IndexScope {
    All,
    Train,
}

// ---------------------------------------------------------------------------
// Subcommand flags and resolved configurations
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SynthArgs {
    /// Re-run the experiment recorded in a config.lock.json (other flags ignored).
    #[arg(long, value_name = "PATH")]
    from_lock: Option<PathBuf>,
    /// Number of classes to generate.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..=8))]
    classes: u64,
    /// Images per class.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(4..))]
    per_class: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset output directory.
    #[arg(long, default_value = "synth-data")]
    out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthConfig {
    classes: usize,
    per_class: usize,
    seed: u64,
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Re-run the experiment recorded in a config.lock.json (other flags ignored).
    #[arg(long, value_name = "PATH")]
    from_lock: Option<PathBuf>,
    /// Dataset root (one subdirectory of PPM images per class).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Artifact output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = KindArg::Siamese)]
    kind: KindArg,
    #[arg(long, value_enum, default_value_t = ProfileArg::Full)]
    profile: ProfileArg,
    /// Defaults: 50 epochs Siamese, 100 triplet.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 5000)]
    samples_per_epoch: usize,
    #[arg(long, default_value_t = 50)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.4)]
    margin: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Size of the fixed validation sample set.
    #[arg(long, default_value_t = 1000)]
    val_samples: usize,
    /// Class directory treated as unseen: all its images move to the test
    /// split and never influence training or normalization statistics.
    #[arg(long)]
    holdout_class: Option<String>,
    #[arg(long, value_enum, default_value_t = StatsScopeArg::Train)]
    stats_scope: StatsScopeArg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainCmdConfig {
    data: PathBuf,
    out: PathBuf,
    kind: NetKind,
    profile: Profile,
    epochs: usize,
    samples_per_epoch: usize,
    batch_size: usize,
    learning_rate: f64,
    momentum: f64,
    margin: f64,
    seed: u64,
    val_samples: usize,
    holdout_class: Option<String>,
    stats_scope: StatsScope,
}

#[derive(Args)]
struct EvalArgs {
    /// Re-run the experiment recorded in a config.lock.json (other flags ignored).
    #[arg(long, value_name = "PATH")]
    from_lock: Option<PathBuf>,
    /// Dataset root the manifest paths are relative to.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Manifest written by `train` (carries splits and normalization stats).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "eval")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Protocol::OneShot)]
    protocol: Protocol,
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    /// Cap on evaluated test images (all of them when omitted).
    #[arg(long)]
    episodes: Option<usize>,
    /// Neighbor counts for the KNN protocol.
    #[arg(long, value_delimiter = ',', default_values_t = [3usize, 5, 7])]
    k: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// How the Siamese head score is read in episodes.
    #[arg(long, value_enum, default_value_t = PolarityArg::GreatestIsSame)]
    polarity: PolarityArg,
    #[arg(long, value_enum, default_value_t = IndexScope::All)]
    index_scope: IndexScope,
    /// Class directories removed from the manifest before evaluation
    /// (e.g. a held-out novelty class with no training support).
    #[arg(long)]
    exclude_class: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalCmdConfig {
    data: PathBuf,
    manifest: PathBuf,
    checkpoint: PathBuf,
    out: PathBuf,
    protocol: Protocol,
    n_way: usize,
    k_shot: usize,
    episodes: Option<usize>,
    k: Vec<usize>,
    seed: u64,
    polarity: Polarity,
    index_scope: IndexScope,
    exclude_class: Vec<String>,
}

#[derive(Args)]
struct NoveltyArgs {
    /// Re-run the experiment recorded in a config.lock.json (other flags ignored).
    #[arg(long, value_name = "PATH")]
    from_lock: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "novelty")]
    out: PathBuf,
    /// Class directory treated as the new (novel) material.
    #[arg(long)]
    holdout_class: Option<String>,
    #[arg(long, value_enum, default_value_t = MethodArg::Lda)]
    method: MethodArg,
    /// Projection dimension counts, one report row each.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3])]
    dims: Vec<usize>,
    /// Number of candidate radii drawn from reference distance quantiles.
    #[arg(long, default_value_t = 24, value_parser = clap::value_parser!(u64).range(1..))]
    x_grid_size: u64,
    /// Count thresholds 1..=y-max are searched.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    y_max: u64,
    /// Fraction of the novel class lent to threshold tuning.
    #[arg(long, default_value_t = 0.2)]
    tune_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoveltyCmdConfig {
    data: PathBuf,
    manifest: PathBuf,
    checkpoint: PathBuf,
    out: PathBuf,
    holdout_class: String,
    method: ProjectionKind,
    dims: Vec<usize>,
    x_grid_size: usize,
    y_max: usize,
    tune_fraction: f64,
    seed: u64,
}

// ---------------------------------------------------------------------------
// Lock files
// ---------------------------------------------------------------------------

/// Fully resolved run configuration; `--from-lock` replays it verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "lowercase")]
enum LockFile {
    Synth(SynthConfig),
    Train(TrainCmdConfig),
    Eval(EvalCmdConfig),
    Novelty(NoveltyCmdConfig),
}

fn read_lock(path: &Path) -> Result<LockFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("bad lock file {}: {e}", path.display())))
}

fn write_lock(out: &Path, lock: &LockFile) -> Result<()> {
    let path = out.join(LOCK_FILE);
    let mut text = serde_json::to_string_pretty(lock).expect("lock serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn lock_mismatch(path: &Path, found: &LockFile, wanted: &str) -> Error {
    let name = match found {
        LockFile::Synth(_) => "synth",
        LockFile::Train(_) => "train",
        LockFile::Eval(_) => "eval",
        LockFile::Novelty(_) => "novelty",
    };
    Error::Data(format!(
        "{} records a `{name}` run, not `{wanted}`",
        path.display()
    ))
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(message) = init_thread_pool() {
        eprintln!("error: {message}");
        return ExitCode::from(2);
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => resolve_synth(args).and_then(run_synth),
        Command::Train(args) => resolve_train(args).and_then(run_train),
        Command::Eval(args) => resolve_eval(args).and_then(run_eval),
        Command::Novelty(args) => resolve_novelty(args).and_then(run_novelty),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                Error::Numeric(_) => 4,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}

/// Caps rayon's worker count from `RESINSORT_THREADS` (all cores by default).
fn init_thread_pool() -> std::result::Result<(), String> {
    let Ok(raw) = std::env::var("RESINSORT_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| format!("RESINSORT_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| format!("thread pool setup failed: {e}"))
}

fn ensure_out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Missing-flag errors surface through clap so they exit with the usage code.
fn require<T>(value: Option<T>, flag: &str) -> T {
    value.unwrap_or_else(|| {
        clap::Error::raw(
            clap::error::ErrorKind::MissingRequiredArgument,
            format!("--{flag} is required unless --from-lock is given\n"),
        )
        .exit()
    })
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn resolve_synth(args: SynthArgs) -> Result<SynthConfig> {
    if let Some(path) = &args.from_lock {
        return match read_lock(path)? {
            LockFile::Synth(cfg) => Ok(cfg),
            other => Err(lock_mismatch(path, &other, "synth")),
        };
    }
    Ok(SynthConfig {
        classes: args.classes as usize,
        per_class: args.per_class as usize,
        seed: args.seed,
        out: args.out,
    })
}

fn run_synth(cfg: SynthConfig) -> Result<()> {
    ensure_out_dir(&cfg.out)?;
    let manifest = synth_generate(cfg.classes, cfg.per_class, cfg.seed, &cfg.out)?;
    let manifest_path = cfg.out.join("manifest.json");
    write_text(&manifest_path, &manifest.to_json())?;
    write_lock(&cfg.out, &LockFile::Synth(cfg.clone()))?;
    println!(
        "generated {} images across {} classes; manifest at {}",
        manifest.records.len(),
        manifest.num_classes(),
        manifest_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn resolve_train(args: TrainArgs) -> Result<TrainCmdConfig> {
    if let Some(path) = &args.from_lock {
        return match read_lock(path)? {
            LockFile::Train(cfg) => Ok(cfg),
            other => Err(lock_mismatch(path, &other, "train")),
        };
    }
    let kind: NetKind = args.kind.into();
    let default_epochs = match kind {
        NetKind::Siamese => 50,
        NetKind::Triplet => 100,
    };
    Ok(TrainCmdConfig {
        data: require(args.data, "data"),
        out: args.out,
        kind,
        profile: args.profile.into(),
        epochs: args.epochs.unwrap_or(default_epochs),
        samples_per_epoch: args.samples_per_epoch,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        momentum: args.momentum,
        margin: args.margin,
        seed: args.seed,
        val_samples: args.val_samples,
        holdout_class: args.holdout_class,
        stats_scope: args.stats_scope.into(),
    })
}

fn run_train(cfg: TrainCmdConfig) -> Result<()> {
    ensure_out_dir(&cfg.out)?;
    let mut manifest = load_dataset(&cfg.data)?;
    split_dataset(&mut manifest, (80, 10, 10), cfg.seed)?;
    if let Some(holdout) = &cfg.holdout_class {
        let class = manifest
            .classes
            .iter()
            .position(|c| c == holdout)
            .ok_or_else(|| Error::Data(format!("holdout class {holdout:?} not in dataset")))?;
        for record in &mut manifest.records {
            if record.class == class {
                record.split = Split::Test;
            }
        }
    }
    manifest.stats = compute_stats(
        &cfg.data,
        &manifest,
        cfg.stats_scope,
        cfg.profile.input_side(),
    )?;
    write_text(&cfg.out.join("manifest.json"), &manifest.to_json())?;
    let train_cfg = TrainConfig {
        kind: cfg.kind,
        profile: cfg.profile,
        epochs: cfg.epochs,
        samples_per_epoch: cfg.samples_per_epoch,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        margin: cfg.margin,
        seed: cfg.seed,
        val_samples: cfg.val_samples,
    };
    let (model, history) = train(&train_cfg, &cfg.data, &manifest)?;
    let checkpoint_path = cfg.out.join("checkpoint.rsrt");
    save_checkpoint(&model, &checkpoint_path)?;
    write_text(&cfg.out.join("loss_history.csv"), &history.to_csv())?;
    write_lock(&cfg.out, &LockFile::Train(cfg.clone()))?;
    println!(
        "trained {} epochs ({} updates); final train loss {:.6}, val loss {:.6}",
        cfg.epochs,
        history.updates,
        history.train.last().copied().unwrap_or(f64::NAN),
        history.val.last().copied().unwrap_or(f64::NAN),
    );
    println!("checkpoint at {}", checkpoint_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn resolve_eval(args: EvalArgs) -> Result<EvalCmdConfig> {
    if let Some(path) = &args.from_lock {
        return match read_lock(path)? {
            LockFile::Eval(cfg) => Ok(cfg),
            other => Err(lock_mismatch(path, &other, "eval")),
        };
    }
    Ok(EvalCmdConfig {
        data: require(args.data, "data"),
        manifest: require(args.manifest, "manifest"),
        checkpoint: require(args.checkpoint, "checkpoint"),
        out: args.out,
        protocol: args.protocol,
        n_way: args.n_way,
        k_shot: args.k_shot,
        episodes: args.episodes,
        k: args.k,
        seed: args.seed,
        polarity: args.polarity.into(),
        index_scope: args.index_scope,
        exclude_class: args.exclude_class,
    })
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    DatasetManifest::from_json(&text)
}

fn run_eval(cfg: EvalCmdConfig) -> Result<()> {
    ensure_out_dir(&cfg.out)?;
    let mut manifest = load_manifest(&cfg.manifest)?;
    for class in &cfg.exclude_class {
        manifest.remove_class(class)?;
    }
    let model = load_checkpoint(&cfg.checkpoint)?;
    let eval_cfg = EvalConfig {
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        episodes: cfg.episodes,
        knn_k: cfg.k.clone(),
        seed: cfg.seed,
        polarity: cfg.polarity,
    };
    match cfg.protocol {
        Protocol::OneShot => {
            eval_cfg.validate(manifest.num_classes())?;
            let accuracy = one_shot_accuracy(&model, &cfg.data, &manifest, &eval_cfg)?;
            let line = format!(
                "one-shot {}-way {}-shot accuracy: {accuracy:.4}\n",
                cfg.n_way, cfg.k_shot
            );
            write_text(&cfg.out.join("one_shot.txt"), &line)?;
            print!("{line}");
        }
        Protocol::Knn => {
            for &k in &cfg.k {
                if k == 0 || k % 2 == 0 {
                    return Err(Error::Data(format!(
                        "knn k values must be odd and >= 1, got {k}"
                    )));
                }
            }
            let report = match cfg.index_scope {
                IndexScope::All => {
                    let index = build_index(&model, &cfg.data, &manifest)?;
                    let queries = manifest.split_records(Split::Test);
                    knn_report(&index, &queries, &cfg.k, &manifest.classes)?
                }
                IndexScope::Train => {
                    let index = build_index_subset(
                        &model,
                        &cfg.data,
                        &manifest,
                        &manifest.split_records(Split::Train),
                    )?;
                    let queries = build_index_subset(
                        &model,
                        &cfg.data,
                        &manifest,
                        &manifest.split_records(Split::Test),
                    )?;
                    knn_report_split(&index, &queries, &cfg.k, &manifest.classes)?
                }
            };
            write_text(&cfg.out.join("knn_report.csv"), &report.to_csv())?;
            write_text(&cfg.out.join("knn_report.txt"), &report.to_text())?;
            print!("{}", report.to_text());
        }
    }
    write_lock(&cfg.out, &LockFile::Eval(cfg.clone()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// novelty
// ---------------------------------------------------------------------------

fn resolve_novelty(args: NoveltyArgs) -> Result<NoveltyCmdConfig> {
    if let Some(path) = &args.from_lock {
        return match read_lock(path)? {
            LockFile::Novelty(cfg) => Ok(cfg),
            other => Err(lock_mismatch(path, &other, "novelty")),
        };
    }
    if !(0.0..=1.0).contains(&args.tune_fraction) {
        clap::Error::raw(
            clap::error::ErrorKind::ValueValidation,
            format!(
                "--tune-fraction must lie in [0, 1], got {}\n",
                args.tune_fraction
            ),
        )
        .exit();
    }
    Ok(NoveltyCmdConfig {
        data: require(args.data, "data"),
        manifest: require(args.manifest, "manifest"),
        checkpoint: require(args.checkpoint, "checkpoint"),
        out: args.out,
        holdout_class: require(args.holdout_class, "holdout-class"),
        method: args.method.into(),
        dims: args.dims,
        x_grid_size: args.x_grid_size as usize,
        y_max: args.y_max as usize,
        tune_fraction: args.tune_fraction,
        seed: args.seed,
    })
}

struct NoveltyRow {
    dims: usize,
    x: f64,
    y: usize,
    counts: ConfusionCounts,
}

fn novelty_report_text(rows: &[NoveltyRow]) -> String {
    let mut out = format!(
        "{:>4} {:>5} {:>5} {:>5} {:>5} {:>9} {:>9} {:>10} {:>4}\n",
        "Dims", "TP", "FP", "TN", "FN", "TP rate", "FP rate", "X", "Y"
    );
    for row in rows {
        out.push_str(&format!(
            "{:>4} {:>5} {:>5} {:>5} {:>5} {:>8.2}% {:>8.2}% {:>10.4} {:>4}\n",
            row.dims,
            row.counts.tp,
            row.counts.fp,
            row.counts.tn,
            row.counts.fn_,
            row.counts.tp_rate(),
            row.counts.fp_rate(),
            row.x,
            row.y
        ));
    }
    out
}

fn novelty_report_csv(rows: &[NoveltyRow]) -> String {
    let mut out = String::from("dims,x,y,tp,fp,tn,fn,tp_rate,fp_rate\n");
    for row in rows {
        out.push_str(&format!(
            "{},{:.17e},{},{},{},{},{},{:.4},{:.4}\n",
            row.dims,
            row.x,
            row.y,
            row.counts.tp,
            row.counts.fp,
            row.counts.tn,
            row.counts.fn_,
            row.counts.tp_rate(),
            row.counts.fp_rate()
        ));
    }
    out
}

fn run_novelty(cfg: NoveltyCmdConfig) -> Result<()> {
    ensure_out_dir(&cfg.out)?;
    let manifest = load_manifest(&cfg.manifest)?;
    let holdout = manifest
        .classes
        .iter()
        .position(|c| c == &cfg.holdout_class)
        .ok_or_else(|| {
            Error::Data(format!(
                "holdout class {:?} not in manifest",
                cfg.holdout_class
            ))
        })?;
    let model = load_checkpoint(&cfg.checkpoint)?;
    let index = build_index(&model, &cfg.data, &manifest)?;

    // Record groups: the holdout class is "new" regardless of split; the
    // remaining classes contribute train (reference), val (tuning negatives),
    // and test (pool negatives) embeddings.
    let mut known_train = Vec::new();
    let mut known_val = Vec::new();
    let mut known_test = Vec::new();
    let mut novel = Vec::new();
    for (i, record) in manifest.records.iter().enumerate() {
        if record.class == holdout {
            novel.push(i);
        } else {
            match record.split {
                Split::Train => known_train.push(i),
                Split::Val => known_val.push(i),
                Split::Test => known_test.push(i),
            }
        }
    }
    if novel.is_empty() {
        return Err(Error::Data(format!(
            "holdout class {:?} has no images",
            cfg.holdout_class
        )));
    }
    if known_train.is_empty() || known_val.is_empty() || known_test.is_empty() {
        return Err(Error::Data(
            "known classes must populate the train, val, and test splits".into(),
        ));
    }

    // A seeded slice of the novel class feeds threshold tuning alongside the
    // known-class validation split; the evaluation pool is every novel image
    // plus the known-class test split.
    let mut shuffled = novel.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffled.shuffle(&mut rng);
    let n_tune = ((novel.len() as f64 * cfg.tune_fraction).ceil() as usize).clamp(1, novel.len());
    let tune_novel = &shuffled[..n_tune];

    // Dense class labels over the known classes only, for LDA.
    let known_class_ids: Vec<usize> = (0..manifest.num_classes())
        .filter(|&c| c != holdout)
        .collect();
    let train_labels: Vec<usize> = known_train
        .iter()
        .map(|&i| {
            known_class_ids
                .iter()
                .position(|&c| c == manifest.records[i].class)
                .expect("known record's class is a known class")
        })
        .collect();
    let train_embeddings: Vec<Vec<f64>> = known_train
        .iter()
        .map(|&i| index.embeddings[i].clone())
        .collect();

    let gather = |proj: &ProjectionModel, rows: &[usize]| -> Result<Vec<Vec<f64>>> {
        rows.iter()
            .map(|&i| proj.project(&index.embeddings[i]))
            .collect()
    };

    let mut rows = Vec::with_capacity(cfg.dims.len());
    let max_dims = cfg.dims.iter().copied().max().unwrap_or(0);
    if max_dims == 0 {
        return Err(Error::Data("at least one dims value is required".into()));
    }
    for &dims in &cfg.dims {
        let projection = match cfg.method {
            ProjectionKind::Pca => fit_pca(&train_embeddings, dims)?,
            ProjectionKind::Lda => fit_lda(
                &train_embeddings,
                &train_labels,
                known_class_ids.len(),
                dims,
            )?,
        };
        let reference = gather(&projection, &known_train)?;
        let mut tuning = gather(&projection, &known_val)?;
        let mut tuning_truth = vec![false; tuning.len()];
        tuning.extend(gather(&projection, tune_novel)?);
        tuning_truth.extend(std::iter::repeat_n(true, tune_novel.len()));
        let x_grid = default_x_grid(&reference, cfg.x_grid_size)?;
        let y_grid: Vec<usize> = (1..=cfg.y_max).collect();
        let rule = tune_params(&reference, &tuning, &tuning_truth, &x_grid, &y_grid)?;

        let pool_rows: Vec<usize> = novel.iter().chain(&known_test).copied().collect();
        let pool = gather(&projection, &pool_rows)?;
        let pool_truth: Vec<bool> = pool_rows
            .iter()
            .map(|&i| manifest.records[i].class == holdout)
            .collect();
        let flags = detect_outliers(&reference, &pool, rule.x, rule.y);
        let counts = confusion(&flags, &pool_truth)?;
        rows.push(NoveltyRow {
            dims,
            x: rule.x,
            y: rule.y,
            counts,
        });

        if dims == max_dims {
            let items: Vec<ProjectedItem> = pool_rows
                .iter()
                .zip(&pool)
                .map(|(&i, coords)| {
                    let record = &manifest.records[i];
                    ProjectedItem {
                        id: record.id.clone(),
                        label: manifest.classes[record.class].clone(),
                        is_new: record.class == holdout,
                        coords: coords.clone(),
                    }
                })
                .collect();
            write_text(
                &cfg.out.join("projection.csv"),
                &export_projection_csv(&items)?,
            )?;
        }
    }

    let text = novelty_report_text(&rows);
    write_text(&cfg.out.join("novelty_report.txt"), &text)?;
    write_text(
        &cfg.out.join("novelty_report.csv"),
        &novelty_report_csv(&rows),
    )?;
    write_lock(&cfg.out, &LockFile::Novelty(cfg.clone()))?;
    print!("{text}");
    Ok(())
}
