//! `mmrank` command-line driver.
//!
//! Every command that writes an output also writes a manifest next to it
//! (`<out>.manifest.json`, or `manifest.json` inside output directories) with
//! the hash of the effective configuration, the seed and input digests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mmrank::corpus::{group_by_query, load_catalog, load_sessions, normalize_query, Catalog, DEFAULT_DWELL_THRESHOLD};
use mmrank::embedding::{build_vocabulary, load_embedding_store, Embedder, EmbeddingStore, Modality, Vocabulary};
use mmrank::pairgen::{derive_seed, make_instances, mine_preference_pairs, write_instances, PreferencePair};
use mmrank::pipeline::{
    continuum_report, disentangle_report, evaluate_sessions, run_experiment, tune, ExperimentConfig,
    RunManifest, DEFAULT_MIN_SHARED_TERMS, DEFAULT_PERCENTILES,
};
use mmrank::ranksvm::{train_sgd, QueryModel, TrainConfig};
use mmrank::synthlog::{write_world, WorldSpec};

#[derive(Parser)]
#[command(name = "mmrank", version, about = "Multimodal pairwise learning to rank")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic catalog, embeddings and session logs.
    GenWorld(GenWorldArgs),
    /// Build the term/listing/shop vocabulary of a catalog.
    BuildVocab(BuildVocabArgs),
    /// Mine preference pairs and dump pairwise instances.
    GenPairs(GenPairsArgs),
    /// Train one query model with fixed hyperparameters.
    Train(TrainArgs),
    /// Grid-search one query model on validation NDCG.
    Tune(TuneArgs),
    /// Mean NDCG of a trained model on a session file.
    Evaluate(EvaluateArgs),
    /// Per-query modality selection (decisions only).
    Select(ExperimentArgs),
    /// Full experiment: report, decisions and optionally models.
    Report(ReportArgs),
    /// Ranked listings at percentile bands for one model.
    Continuum(ContinuumArgs),
    /// Pairs with shared title terms and their rank distance under two models.
    Disentangle(DisentangleArgs),
}

#[derive(Args)]
struct GenWorldArgs {
    /// TOML world specification; flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    listings: Option<usize>,
    #[arg(long)]
    sessions: Option<usize>,
    #[arg(long)]
    ambiguity: Option<f64>,
    #[arg(long)]
    signal: Option<f64>,
    /// Comma-separated examination probabilities; the count sets the page size.
    #[arg(long, value_delimiter = ',')]
    bias: Option<Vec<f64>>,
    /// Write embeddings in the text format instead of binary.
    #[arg(long)]
    text_embeddings: bool,
}

#[derive(Args)]
struct BuildVocabArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long, default_value_t = 1)]
    min_term_count: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Catalog, embeddings and vocabulary for commands that embed listings.
#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Vocabulary JSON; built from the catalog when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    min_term_count: usize,
}

struct Data {
    catalog: Catalog,
    store: Option<EmbeddingStore>,
    vocab: Vocabulary,
    inputs: Vec<PathBuf>,
}

impl Data {
    fn embedder(&self) -> Embedder<'_> {
        Embedder::new(&self.catalog, &self.vocab, self.store.as_ref())
    }
}

impl DataArgs {
    fn load(&self) -> Result<Data> {
        let mut inputs = vec![self.catalog.clone()];
        let catalog = load_catalog(&self.catalog)?;
        let store = match &self.embeddings {
            Some(p) => {
                inputs.push(p.clone());
                Some(load_embedding_store(p)?)
            }
            None => None,
        };
        let vocab = match &self.vocab {
            Some(p) => {
                inputs.push(p.clone());
                Vocabulary::from_json(&std::fs::read_to_string(p)?)?
            }
            None => build_vocabulary(&catalog, self.min_term_count)?,
        };
        Ok(Data {
            catalog,
            store,
            vocab,
            inputs,
        })
    }

    fn describe(&self) -> serde_json::Value {
        json!({
            "catalog": self.catalog,
            "embeddings": self.embeddings,
            "vocab": self.vocab,
            "min_term_count": self.min_term_count,
        })
    }
}

#[derive(Args)]
struct GenPairsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    sessions: PathBuf,
    #[arg(long, default_value = "text")]
    modality: Modality,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_DWELL_THRESHOLD)]
    dwell_threshold: f64,
    /// Restrict to one query.
    #[arg(long)]
    query: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    sessions: PathBuf,
    #[arg(long)]
    query: String,
    #[arg(long, default_value = "multimodal")]
    modality: Modality,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr_decay: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda1: f64,
    #[arg(long, default_value_t = 1e-6)]
    lambda2: f64,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_DWELL_THRESHOLD)]
    dwell_threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Experiment configuration file plus overrides.
#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment configuration; relative paths resolve against its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    modalities: Option<Vec<Modality>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    min_pairs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

impl ExperimentArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let mut c = ExperimentConfig::load(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                c.resolve_paths(path.parent().unwrap_or(Path::new(".")));
                c
            }
            None => ExperimentConfig::default(),
        };
        if let Some(p) = &self.catalog {
            config.catalog = p.clone();
        }
        if let Some(p) = &self.embeddings {
            config.embeddings = Some(p.clone());
        }
        if let Some(p) = &self.train {
            config.train_sessions = p.clone();
        }
        if let Some(p) = &self.validation {
            config.validation_sessions = p.clone();
        }
        if let Some(p) = &self.test {
            config.test_sessions = p.clone();
        }
        if let Some(m) = &self.modalities {
            config.modalities = m.clone();
        }
        if let Some(v) = self.epochs {
            config.epochs = v;
        }
        if let Some(v) = self.min_pairs {
            config.min_pairs_per_query = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if self.threads.is_some() {
            config.threads = self.threads;
        }
        if !config.modalities.iter().any(|m| m.uses_image()) {
            config.embeddings = None;
        }
        config.validate()?;
        Ok(config)
    }
}

fn config_inputs(config: &ExperimentConfig) -> Vec<PathBuf> {
    let mut v = vec![config.catalog.clone()];
    v.extend(config.embeddings.clone());
    v.extend([
        config.train_sessions.clone(),
        config.validation_sessions.clone(),
        config.test_sessions.clone(),
    ]);
    v
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    #[arg(long)]
    query: String,
    #[arg(long, default_value = "multimodal")]
    modality: Modality,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Also save every tuned model under `<out>/models`.
    #[arg(long)]
    save_models: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    sessions: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DWELL_THRESHOLD)]
    dwell_threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ContinuumArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    sessions: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_PERCENTILES)]
    percentiles: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    band_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DisentangleArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model_a: PathBuf,
    #[arg(long)]
    model_b: PathBuf,
    /// Listings shown in these sessions are compared.
    #[arg(long)]
    sessions: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MIN_SHARED_TERMS)]
    min_shared_terms: usize,
    /// Keep only the first N pairs.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn write_manifest(
    command: &str,
    params: &serde_json::Value,
    seed: u64,
    inputs: &[PathBuf],
    path: &Path,
) -> Result<()> {
    let manifest = RunManifest::new(command, &serde_json::to_string(params)?, seed, inputs)?;
    manifest.write(path)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn query_pairs(sessions: &Path, query: Option<&str>, dwell_threshold: f64) -> Result<Vec<PreferencePair>> {
    let sessions = load_sessions(sessions)?;
    let mut pairs = mine_preference_pairs(&sessions, dwell_threshold);
    if let Some(q) = query {
        let q = normalize_query(q);
        pairs.retain(|p| p.query == q);
    }
    Ok(pairs)
}

fn gen_world(args: &GenWorldArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => toml::from_str::<WorldSpec>(&std::fs::read_to_string(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => WorldSpec::default(),
    };
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.queries {
        spec.n_queries = v;
    }
    if let Some(v) = args.listings {
        spec.n_listings_per_query = v;
    }
    if let Some(v) = args.sessions {
        spec.n_sessions_per_query = v;
    }
    if let Some(v) = args.ambiguity {
        spec.text_ambiguity = v;
    }
    if let Some(v) = args.signal {
        spec.image_signal = v;
    }
    if let Some(v) = &args.bias {
        spec.position_bias = v.clone();
    }
    let files = write_world(&spec, &args.out, !args.text_embeddings)?;
    std::fs::write(args.out.join("world.toml"), toml::to_string(&spec)?)?;

    let file_name = |p: &Path| PathBuf::from(p.file_name().expect("generated file"));
    let experiment = ExperimentConfig {
        catalog: file_name(&files.catalog),
        embeddings: Some(file_name(&files.embeddings)),
        train_sessions: file_name(&files.train_sessions),
        validation_sessions: file_name(&files.validation_sessions),
        test_sessions: file_name(&files.test_sessions),
        seed: spec.seed,
        ..ExperimentConfig::default()
    };
    std::fs::write(args.out.join("experiment.toml"), experiment.to_toml()?)?;
    write_manifest(
        "gen-world",
        &serde_json::to_value(&spec)?,
        spec.seed,
        &[],
        &args.out.join("manifest.json"),
    )?;
    log::info!("world written to {}", args.out.display());
    Ok(())
}

fn build_vocab(args: &BuildVocabArgs) -> Result<()> {
    let catalog = load_catalog(&args.catalog)?;
    let vocab = build_vocabulary(&catalog, args.min_term_count)?;
    std::fs::write(&args.out, vocab.to_json())?;
    log::info!(
        "{} terms, {} listings, {} shops",
        vocab.n_terms(),
        vocab.n_listings(),
        vocab.n_shops()
    );
    write_manifest(
        "build-vocab",
        &json!({ "catalog": args.catalog, "min_term_count": args.min_term_count }),
        0,
        std::slice::from_ref(&args.catalog),
        &manifest_path(&args.out),
    )
}

fn gen_pairs(args: &GenPairsArgs) -> Result<()> {
    let data = args.data.load()?;
    let pairs = query_pairs(&args.sessions, args.query.as_deref(), args.dwell_threshold)?;
    let set = make_instances(&pairs, &data.embedder(), args.modality, args.seed);
    let file = std::fs::File::create(&args.out)?;
    write_instances(&set.instances, std::io::BufWriter::new(file))?;
    log::info!(
        "{} pairs mined, {} instances written, {} dropped",
        pairs.len(),
        set.instances.len(),
        set.dropped
    );
    let mut inputs = data.inputs;
    inputs.push(args.sessions.clone());
    write_manifest(
        "gen-pairs",
        &json!({
            "data": args.data.describe(),
            "sessions": args.sessions,
            "modality": args.modality,
            "seed": args.seed,
            "dwell_threshold": args.dwell_threshold,
            "query": args.query,
        }),
        args.seed,
        &inputs,
        &manifest_path(&args.out),
    )
}

fn train(args: &TrainArgs) -> Result<()> {
    let data = args.data.load()?;
    let pairs = query_pairs(&args.sessions, Some(&args.query), args.dwell_threshold)?;
    if pairs.is_empty() {
        bail!("no preference pairs for query `{}`", args.query);
    }
    let query = normalize_query(&args.query);
    let set = make_instances(&pairs, &data.embedder(), args.modality, derive_seed(args.seed, &query));
    let config = TrainConfig {
        learning_rate: args.learning_rate,
        lr_decay: args.lr_decay,
        lambda1: args.lambda1,
        lambda2: args.lambda2,
        epochs: args.epochs,
        seed: args.seed,
        shuffle: true,
    };
    let mut model = train_sgd(&set.instances, args.modality, &config)?;
    model.query = query;
    model.save(&args.out)?;
    log::info!(
        "trained on {} instances, final objective {:.4}",
        model.train_stats.instance_count,
        model.train_stats.final_objective
    );
    let mut inputs = data.inputs;
    inputs.push(args.sessions.clone());
    write_manifest(
        "train",
        &json!({
            "data": args.data.describe(),
            "sessions": args.sessions,
            "modality": args.modality,
            "config": config,
        }),
        args.seed,
        &inputs,
        &manifest_path(&args.out),
    )
}

fn experiment_data(config: &ExperimentConfig) -> Result<(Catalog, Option<EmbeddingStore>, Vocabulary)> {
    let catalog = load_catalog(&config.catalog)?;
    let store = match &config.embeddings {
        Some(p) => Some(load_embedding_store(p)?),
        None => None,
    };
    let vocab = build_vocabulary(&catalog, config.min_term_count)?;
    Ok((catalog, store, vocab))
}

fn tune_cmd(args: &TuneArgs) -> Result<()> {
    let config = args.experiment.config()?;
    let (catalog, store, vocab) = experiment_data(&config)?;
    let embedder = Embedder::new(&catalog, &vocab, store.as_ref());
    let query = normalize_query(&args.query);
    let th = config.dwell_threshold;
    let pairs = query_pairs(&config.train_sessions, Some(&query), th)?;
    let seed = derive_seed(config.seed, &query);
    let set = make_instances(&pairs, &embedder, args.modality, seed);
    if set.instances.is_empty() {
        bail!("no training instances for query `{query}`");
    }
    let validation = load_sessions(&config.validation_sessions)?;
    let by_query = group_by_query(&validation);
    let labeled: Vec<_> = by_query
        .get(query.as_str())
        .map(|v| v.iter().copied().filter(|s| s.has_relevant(th)).collect())
        .unwrap_or_default();
    if labeled.is_empty() {
        bail!("no labeled validation sessions for query `{query}`");
    }
    let grid = config.grid.points(config.epochs, seed);
    let outcome = tune(&set.instances, args.modality, &grid, &labeled, &embedder, th)?;
    let mut model = outcome.model;
    model.query = query.clone();
    model.save(&args.experiment.out)?;
    let scores: Vec<_> = grid
        .iter()
        .zip(&outcome.grid_scores)
        .map(|(c, s)| json!({ "config": c, "validation_ndcg": s }))
        .collect();
    write_json(
        &args.experiment.out.with_extension("grid.json"),
        &json!({ "query": query, "modality": args.modality, "grid": scores, "best": outcome.validation_ndcg }),
    )?;
    println!("{query}\t{}\tvalidation NDCG {:.4}", args.modality, outcome.validation_ndcg);
    write_manifest(
        "tune",
        &json!({ "config": config, "query": query, "modality": args.modality }),
        config.seed,
        &config_inputs(&config),
        &manifest_path(&args.experiment.out),
    )
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let data = args.data.load()?;
    let model = QueryModel::load(&args.model)?;
    let sessions = load_sessions(&args.sessions)?;
    let by_query = group_by_query(&sessions);
    let labeled: Vec<_> = by_query
        .get(model.query.as_str())
        .map(|v| v.iter().copied().filter(|s| s.has_relevant(args.dwell_threshold)).collect())
        .unwrap_or_default();
    let (scores, skipped) = evaluate_sessions(&model, &labeled, &data.embedder(), args.dwell_threshold)?;
    if scores.is_empty() {
        bail!("no evaluable sessions for query `{}`", model.query);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    write_json(
        &args.out,
        &json!({
            "query": model.query,
            "modality": model.modality,
            "mean_ndcg": mean,
            "sessions": scores.len(),
            "skipped_sessions": skipped,
        }),
    )?;
    println!("{}\t{}\tNDCG {mean:.4} over {} sessions", model.query, model.modality, scores.len());
    let mut inputs = data.inputs;
    inputs.extend([args.model.clone(), args.sessions.clone()]);
    write_manifest(
        "evaluate",
        &json!({ "data": args.data.describe(), "model": args.model, "sessions": args.sessions, "dwell_threshold": args.dwell_threshold }),
        0,
        &inputs,
        &manifest_path(&args.out),
    )
}

fn select(args: &ExperimentArgs) -> Result<()> {
    let config = args.config()?;
    let outcome = run_experiment(&config)?;
    write_json(&args.out, &outcome.decisions)?;
    for d in &outcome.decisions {
        println!("{}\t{}", d.query, d.chosen_modality);
    }
    write_manifest(
        "select",
        &serde_json::to_value(&config)?,
        config.seed,
        &config_inputs(&config),
        &manifest_path(&args.out),
    )
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

fn report(args: &ReportArgs) -> Result<()> {
    let config = args.experiment.config()?;
    let out = &args.experiment.out;
    std::fs::create_dir_all(out)?;
    let outcome = run_experiment(&config)?;
    std::fs::write(out.join("report.json"), outcome.report.to_json()?)?;
    let table = outcome.report.to_table();
    std::fs::write(out.join("report.txt"), &table)?;
    write_json(&out.join("decisions.json"), &outcome.decisions)?;
    if args.save_models {
        let dir = out.join("models");
        std::fs::create_dir_all(&dir)?;
        for (query, by_modality) in &outcome.models {
            for (modality, model) in by_modality {
                model.save(dir.join(format!("{}.{modality}.json", slug(query))))?;
            }
        }
    }
    print!("{table}");
    write_manifest(
        "report",
        &serde_json::to_value(&config)?,
        config.seed,
        &config_inputs(&config),
        &out.join("manifest.json"),
    )
}

fn continuum(args: &ContinuumArgs) -> Result<()> {
    let data = args.data.load()?;
    let model = QueryModel::load(&args.model)?;
    let sessions = load_sessions(&args.sessions)?;
    let by_query = group_by_query(&sessions);
    let mine = by_query.get(model.query.as_str()).cloned().unwrap_or_default();
    let report = continuum_report(&model, &mine, &data.embedder(), &args.percentiles, args.band_size)?;
    write_json(&args.out, &report)?;
    let mut inputs = data.inputs;
    inputs.extend([args.model.clone(), args.sessions.clone()]);
    write_manifest(
        "continuum",
        &json!({ "data": args.data.describe(), "model": args.model, "sessions": args.sessions, "percentiles": args.percentiles, "band_size": args.band_size }),
        0,
        &inputs,
        &manifest_path(&args.out),
    )
}

fn disentangle(args: &DisentangleArgs) -> Result<()> {
    let data = args.data.load()?;
    let a = QueryModel::load(&args.model_a)?;
    let b = QueryModel::load(&args.model_b)?;
    if a.query != b.query {
        bail!("models belong to different queries (`{}` vs `{}`)", a.query, b.query);
    }
    let sessions = load_sessions(&args.sessions)?;
    let ids: Vec<String> = sessions
        .iter()
        .filter(|s| s.query == a.query)
        .flat_map(|s| s.presented.iter().map(|r| r.listing_id.clone()))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut entries = disentangle_report(&a, &b, &ids, &data.embedder(), args.min_shared_terms)?;
    if let Some(n) = args.limit {
        entries.truncate(n);
    }
    let mut summary = BTreeMap::new();
    summary.insert("query", json!(a.query));
    summary.insert("model_a", json!(a.modality));
    summary.insert("model_b", json!(b.modality));
    summary.insert("pairs", json!(entries));
    write_json(&args.out, &summary)?;
    let mut inputs = data.inputs;
    inputs.extend([args.model_a.clone(), args.model_b.clone(), args.sessions.clone()]);
    write_manifest(
        "disentangle",
        &json!({ "data": args.data.describe(), "model_a": args.model_a, "model_b": args.model_b, "sessions": args.sessions, "min_shared_terms": args.min_shared_terms, "limit": args.limit }),
        0,
        &inputs,
        &manifest_path(&args.out),
    )
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::GenWorld(a) => gen_world(a),
        Command::BuildVocab(a) => build_vocab(a),
        Command::GenPairs(a) => gen_pairs(a),
        Command::Train(a) => train(a),
        Command::Tune(a) => tune_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Select(a) => select(a),
        Command::Report(a) => report(a),
        Command::Continuum(a) => continuum(a),
        Command::Disentangle(a) => disentangle(a),
    }
}
