mod overrides;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use trajal_core::al::{initial_labels, run_session, Evaluator, Journal, Session, SessionConfig, SessionMode, SimulatedOracle, Strategy};
use trajal_core::autoencoder::{embed_pool, train_autoencoder, AeConfig, AeKind, Autoencoder, CellKind};
use trajal_core::classifiers::{ClassifierConfig, ClassifierTag};
use trajal_core::dtw::{cached_distances, prepare_series, trajectory_distances, DtwConfig};
use trajal_core::embedding::{Embedding, EmbeddingTag};
use trajal_core::experiments::{run_plan, stripped, ExperimentPlan};
use trajal_core::generator::{generate_dataset, Dataset, DatasetSpec};
use trajal_core::io::{read_dataset, read_embedding, write_dataset, write_embedding, write_trace};
use trajal_core::trajectory::{ClassLabel, TrajId, Trajectory, TrajectorySource};
use trajal_core::tsne::{embed, EmbeddingConfig};

use overrides::layered;

/// Trajectory embeddings and pool-based active learning.
///
/// Every command builds its configuration from defaults, then `--config`,
/// then `--set`, then the dedicated flags. `--set` reaches any field of the
/// configuration printed by `--show-config`.
#[derive(Debug, Parser)]
#[command(name = "trajal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Layers {
    /// JSON file merged over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `path.to.field=value`; the value is JSON or a bare string.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    sets: Vec<String>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    show_config: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset with its split.
    Generate(GenerateArgs),
    /// Embed a dataset with mTSNE, RAE or VRAE.
    Embed(EmbedArgs),
    /// Train an autoencoder and save a checkpoint.
    TrainAe(TrainAeArgs),
    /// Run one simulated active-learning session.
    RunAl(RunAlArgs),
    /// Run a grid of repeated sessions and write averaged curves.
    RunPlan(RunPlanArgs),
    /// Host live annotation sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scale {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Classification,
    Discovery,
}

impl From<Mode> for SessionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Classification => SessionMode::Classification,
            Mode::Discovery => SessionMode::UnknownClassDiscovery,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Rae,
    Vrae,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cell {
    Lstm,
    Gru,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    layers: Layers,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Percentage of cut-ins in the unlabeled and test pools.
    #[arg(long, default_value_t = 10)]
    alpha: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Scale::Desk)]
    scale: Scale,
    #[arg(long)]
    annotated: Option<usize>,
    #[arg(long)]
    unlabeled: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
}

#[derive(Debug, Args)]
struct AeFlags {
    #[arg(long, value_enum)]
    cell: Option<Cell>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long = "ae-layers")]
    ae_layers: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Full-width autoencoder instead of the desk-scale one.
    #[arg(long)]
    full_scale: bool,
    /// Fit only on trajectories of these classes (comma separated).
    #[arg(long, value_delimiter = ',')]
    train_classes: Vec<ClassLabel>,
}

impl AeFlags {
    fn defaults(&self) -> AeConfig {
        if self.full_scale {
            AeConfig::default()
        } else {
            AeConfig::desk()
        }
    }

    fn apply(&self, c: &mut AeConfig) {
        if let Some(cell) = self.cell {
            c.cell = match cell {
                Cell::Lstm => CellKind::Lstm,
                Cell::Gru => CellKind::Gru,
            };
        }
        set(&mut c.epochs, self.epochs);
        set(&mut c.hidden, self.hidden);
        set(&mut c.latent, self.latent);
        set(&mut c.layers, self.ae_layers);
        set(&mut c.adam.learning_rate, self.learning_rate);
    }
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[command(flatten)]
    layers: Layers,
    /// Dataset directory written by `generate`.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "mTSNE")]
    method: EmbeddingTag,
    /// Embedding output (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// KL divergence (mTSNE) or training loss (autoencoders) per iteration.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    perplexity: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Reuse DTW distances from this cache file when the pool matches.
    #[arg(long)]
    dtw_cache: Option<PathBuf>,
    /// Encode with a saved autoencoder instead of training one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    ae: AeFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EmbedConfig {
    dtw: DtwConfig,
    tsne: EmbeddingConfig,
    autoencoder: AeConfig,
}

#[derive(Debug, Args)]
struct TrainAeArgs {
    #[command(flatten)]
    layers: Layers,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = Kind::Rae)]
    kind: Kind,
    /// Checkpoint output.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    ae: AeFlags,
}

#[derive(Debug, Args)]
struct RunAlArgs {
    #[command(flatten)]
    layers: Layers,
    #[arg(long)]
    dataset: PathBuf,
    /// Embedding file written by `embed`.
    #[arg(long)]
    embedding: PathBuf,
    #[arg(long, default_value = "entropy")]
    strategy: Strategy,
    #[arg(long, default_value = "SVM")]
    classifier: ClassifierTag,
    #[arg(long, default_value_t = 60)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Mode::Classification)]
    mode: Mode,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Append-only event journal.
    #[arg(long)]
    journal: Option<PathBuf>,
    /// Metric per step.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Query log (JSON lines).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunPlanArgs {
    #[command(flatten)]
    layers: Layers,
    /// Directory for curve files and the manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    embeddings: Vec<EmbeddingTag>,
    #[arg(long, value_delimiter = ',')]
    classifiers: Vec<ClassifierTag>,
    #[arg(long, value_delimiter = ',')]
    strategies: Vec<Strategy>,
    #[arg(long, value_delimiter = ',')]
    alphas: Vec<u8>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    workers: Option<usize>,
    /// Reference-scale pools and models.
    #[arg(long)]
    full_scale: bool,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Root for dataset directories and embedding files.
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    journal_dir: PathBuf,
    /// Built annotation UI, served under /ui.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn nonempty<T: Clone>(v: &[T]) -> Option<Vec<T>> {
    (!v.is_empty()).then(|| v.to_vec())
}

/// Resolves a config, or prints it and returns `None` for `--show-config`.
fn resolve<T: Serialize + serde::de::DeserializeOwned>(layers: &Layers, defaults: T, flags: impl FnOnce(&mut T)) -> Result<Option<T>> {
    let mut c = layered(&defaults, layers.config.as_deref(), &layers.sets)?;
    flags(&mut c);
    if layers.show_config {
        println!("{}", serde_json::to_string_pretty(&c)?);
        return Ok(None);
    }
    Ok(Some(c))
}

fn load(dir: &Path) -> Result<Dataset> {
    read_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn training_set<'a>(dataset: &'a Dataset, pool: &'a [Trajectory], classes: &[ClassLabel]) -> Vec<&'a Trajectory> {
    if classes.is_empty() {
        return pool.iter().collect();
    }
    let keep: std::collections::BTreeSet<TrajId> = dataset.store.restricted_to(classes).ids().into_iter().collect();
    pool.iter().filter(|t| keep.contains(&t.id)).collect()
}

fn generate(a: GenerateArgs) -> Result<()> {
    let defaults = match a.scale {
        Scale::Desk => DatasetSpec::desk_scale(a.alpha, a.seed)?,
        Scale::Full => DatasetSpec::full_scale(a.alpha, a.seed)?,
    };
    let Some(spec) = resolve(&a.layers, defaults, |s: &mut DatasetSpec| {
        set(&mut s.annotated, a.annotated);
        set(&mut s.unlabeled, a.unlabeled);
        set(&mut s.test, a.test);
    })?
    else {
        return Ok(());
    };
    let dataset = generate_dataset(&spec)?;
    write_dataset(&a.out, &dataset)?;
    println!(
        "{}",
        json!({"out": a.out, "trajectories": dataset.store.len(), "annotated": spec.annotated, "unlabeled": spec.unlabeled, "test": spec.test})
    );
    Ok(())
}

fn embed_cmd(a: EmbedArgs) -> Result<()> {
    let defaults = EmbedConfig {
        dtw: DtwConfig::default(),
        tsne: EmbeddingConfig {
            iterations: 500,
            ..EmbeddingConfig::default()
        },
        autoencoder: a.ae.defaults(),
    };
    let Some(mut cfg) = resolve(&a.layers, defaults, |c: &mut EmbedConfig| {
        set(&mut c.tsne.perplexity, a.perplexity);
        set(&mut c.tsne.iterations, a.iterations);
        set(&mut c.tsne.seed, a.seed);
        set(&mut c.autoencoder.seed, a.seed);
        a.ae.apply(&mut c.autoencoder);
    })?
    else {
        return Ok(());
    };
    let dataset = load(&a.dataset)?;
    let pool = stripped(&dataset);
    let refs: Vec<&Trajectory> = pool.iter().collect();
    let (embedding, trace, header) = match a.method {
        EmbeddingTag::MTsne => {
            let d = match &a.dtw_cache {
                Some(path) => cached_distances(&prepare_series(&refs, &cfg.dtw), &cfg.dtw.options, cfg.dtw.parallelism, path)?,
                None => trajectory_distances(&refs, &cfg.dtw)?,
            };
            let ids: Vec<TrajId> = pool.iter().map(|t| t.id).collect();
            let result = embed(&d, &cfg.tsne)?;
            let trace = result.kl_trace.clone();
            (Embedding::from_points(result.into_points(&ids))?, trace, "iteration kl")
        }
        tag => {
            let model = match &a.checkpoint {
                Some(path) => Autoencoder::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?,
                None => {
                    cfg.autoencoder.kind = if tag == EmbeddingTag::Rae { AeKind::Rae } else { AeKind::Vrae };
                    train_autoencoder(&training_set(&dataset, &pool, &a.ae.train_classes), &cfg.autoencoder)?
                }
            };
            if model.tag() != tag {
                bail!("checkpoint holds a {:?} model, not {tag:?}", model.tag());
            }
            (embed_pool(&model, &refs)?, model.loss_trace.clone(), "epoch loss")
        }
    };
    write_embedding(&a.out, &embedding)?;
    if let Some(path) = &a.trace {
        write_trace(path, header, &trace)?;
    }
    println!("{}", json!({"out": a.out, "method": a.method, "points": embedding.len(), "final": trace.last()}));
    Ok(())
}

fn train_ae(a: TrainAeArgs) -> Result<()> {
    let kind = match a.kind {
        Kind::Rae => AeKind::Rae,
        Kind::Vrae => AeKind::Vrae,
    };
    let defaults = AeConfig { kind, ..a.ae.defaults() };
    let Some(cfg) = resolve(&a.layers, defaults, |c: &mut AeConfig| {
        set(&mut c.seed, a.seed);
        a.ae.apply(c);
    })?
    else {
        return Ok(());
    };
    let dataset = load(&a.dataset)?;
    let pool = stripped(&dataset);
    let model = train_autoencoder(&training_set(&dataset, &pool, &a.ae.train_classes), &cfg)?;
    model.save(&a.out)?;
    if let Some(path) = &a.trace {
        write_trace(path, "epoch loss", &model.loss_trace)?;
    }
    println!("{}", json!({"out": a.out, "epochs": model.loss_trace.len(), "final_loss": model.loss_trace.last()}));
    Ok(())
}

fn run_al(a: RunAlArgs) -> Result<()> {
    let embedding = read_embedding(&a.embedding).with_context(|| format!("loading embedding {}", a.embedding.display()))?;
    let classifier = ClassifierConfig::default_for(a.classifier);
    let defaults = match a.mode {
        Mode::Classification => SessionConfig::classification(embedding.tag, classifier, a.strategy, a.budget, a.seed),
        Mode::Discovery => SessionConfig::discovery(embedding.tag, classifier, a.strategy, a.budget, a.seed),
    };
    let Some(cfg) = resolve(&a.layers, defaults, |c: &mut SessionConfig| set(&mut c.batch_size, a.batch_size))? else {
        return Ok(());
    };
    let dataset = load(&a.dataset)?;
    let discovery = cfg.mode == SessionMode::UnknownClassDiscovery;
    let labels = initial_labels(&dataset.store.restricted_to(&cfg.known_classes), &dataset.partition);
    let evaluator = Evaluator::from_source(&dataset.store, &dataset.partition, discovery)?;
    let id = a.journal.as_ref().and_then(|p| p.file_stem()).map_or("run".into(), |s| s.to_string_lossy().into_owned());
    let session = Session::new(id, cfg, dataset.partition.clone(), Arc::new(embedding), labels, evaluator)?;
    let mut journal = a.journal.as_deref().map(Journal::create).transpose()?;
    let done = run_session(session, &mut SimulatedOracle::new(&dataset.store), journal.as_mut())?;
    if let Some(path) = &a.out {
        write_trace(path, if discovery { "step unknown_class_count" } else { "step macro_f1" }, done.metrics())?;
    }
    if let Some(path) = &a.log {
        let mut text = String::new();
        for r in done.log() {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        std::fs::write(path, text)?;
    }
    println!("{}", json!({"queries": done.log().len(), "final_metric": done.metrics().last()}));
    Ok(())
}

fn run_plan_cmd(a: RunPlanArgs) -> Result<()> {
    let mut defaults = ExperimentPlan::desk(
        vec![EmbeddingTag::MTsne],
        vec![ClassifierTag::Svm],
        vec![Strategy::Random, Strategy::Margin, Strategy::Entropy],
        vec![10],
    );
    if a.full_scale {
        defaults.desk_scale = false;
        defaults.autoencoder = AeConfig::default();
        defaults.tsne = EmbeddingConfig::default();
    }
    let Some(plan) = resolve(&a.layers, defaults, |p: &mut ExperimentPlan| {
        set(&mut p.embeddings, nonempty(&a.embeddings));
        set(&mut p.classifiers, nonempty(&a.classifiers));
        set(&mut p.strategies, nonempty(&a.strategies));
        set(&mut p.alphas, nonempty(&a.alphas));
        set(&mut p.repetitions, a.repetitions);
        set(&mut p.budget, a.budget);
        set(&mut p.base_seed, a.seed);
        set(&mut p.mode, a.mode.map(Into::into));
        set(&mut p.workers, a.workers);
    })?
    else {
        return Ok(());
    };
    let result = run_plan(&plan)?;
    result.write(&a.out, &plan)?;
    for f in &result.failures {
        log::warn!("cell {} seed {} failed: {}", f.cell.file_stem(), f.seed, f.error);
    }
    println!("{}", json!({"out": a.out, "cells": result.summaries.len(), "failures": result.failures.len()}));
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let config = trajal_service::ServiceConfig {
        data_dir: a.data_dir,
        journal_dir: a.journal_dir,
        static_dir: a.static_dir,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(trajal_service::serve(config, a.addr))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Embed(a) => embed_cmd(a),
        Command::TrainAe(a) => train_ae(a),
        Command::RunAl(a) => run_al(a),
        Command::RunPlan(a) => run_plan_cmd(a),
        Command::Serve(a) => serve(a),
    }
}

/// Variant name of the innermost library error, if any.
fn error_kind(e: &anyhow::Error) -> String {
    e.chain()
        .find_map(|c| c.downcast_ref::<trajal_core::Error>())
        .map(|e| {
            let dbg = format!("{e:?}");
            dbg.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Error").to_string()
        })
        .unwrap_or_else(|| "Error".into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({"error": "Usage", "message": e.to_string().trim_end()}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let causes: Vec<String> = e.chain().skip(1).map(ToString::to_string).collect();
            eprintln!("{}", json!({"error": error_kind(&e), "message": e.to_string(), "causes": causes}));
            ExitCode::FAILURE
        }
    }
}
