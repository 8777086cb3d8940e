//! Experiment orchestration: per-query training for each modality, grid
//! tuning on validation NDCG, per-query modality selection, test evaluation
//! and the listing-level reports.
//!
//! Work items are independent (query, modality) jobs run on a rayon pool.
//! Results are collected in input order and keyed in ordered maps, so the
//! report does not depend on scheduling.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{group_by_query, load_catalog, load_sessions, Catalog, Session, DEFAULT_DWELL_THRESHOLD};
use crate::embedding::{build_vocabulary, load_embedding_store, tokenize, Embedder, EmbeddingStore, Modality, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, relative_lift, session_ndcg, wilcoxon_signed_rank, EvalReport, QueryScore};
use crate::pairgen::{derive_seed, make_instances, mine_preference_pairs, pairs_by_query, PairwiseInstance};
use crate::ranksvm::{rank, train_sgd, QueryModel, TrainConfig};

pub const SELECTED_COLUMN: &str = "selected";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub learning_rate: Vec<f64>,
    pub lr_decay: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            learning_rate: vec![0.1, 0.01],
            lr_decay: vec![1e-4],
            lambda1: vec![0.0, 1e-6, 1e-5],
            lambda2: vec![1e-6, 1e-4],
        }
    }
}

impl GridSpec {
    pub fn single(config: &TrainConfig) -> Self {
        GridSpec {
            learning_rate: vec![config.learning_rate],
            lr_decay: vec![config.lr_decay],
            lambda1: vec![config.lambda1],
            lambda2: vec![config.lambda2],
        }
    }

    pub fn len(&self) -> usize {
        self.learning_rate.len() * self.lr_decay.len() * self.lambda1.len() * self.lambda2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid points in a fixed order: learning rate outermost, `lambda2` innermost.
    pub fn points(&self, epochs: usize, seed: u64) -> Vec<TrainConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &learning_rate in &self.learning_rate {
            for &lr_decay in &self.lr_decay {
                for &lambda1 in &self.lambda1 {
                    for &lambda2 in &self.lambda2 {
                        out.push(TrainConfig {
                            learning_rate,
                            lr_decay,
                            lambda1,
                            lambda2,
                            epochs,
                            seed,
                            shuffle: true,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub catalog: PathBuf,
    /// Required when an image-using modality is requested.
    pub embeddings: Option<PathBuf>,
    pub train_sessions: PathBuf,
    pub validation_sessions: PathBuf,
    pub test_sessions: PathBuf,
    pub modalities: Vec<Modality>,
    pub grid: GridSpec,
    pub epochs: usize,
    pub min_pairs_per_query: usize,
    pub dwell_threshold: f64,
    pub min_term_count: usize,
    pub seed: u64,
    pub significance_level: f64,
    /// Worker threads; `None` uses rayon's default.
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            catalog: PathBuf::from("catalog.tsv"),
            embeddings: Some(PathBuf::from("embeddings.txt")),
            train_sessions: PathBuf::from("sessions_train.jsonl"),
            validation_sessions: PathBuf::from("sessions_valid.jsonl"),
            test_sessions: PathBuf::from("sessions_test.jsonl"),
            modalities: Modality::ALL.to_vec(),
            grid: GridSpec::default(),
            epochs: 5,
            min_pairs_per_query: 50,
            dwell_threshold: DEFAULT_DWELL_THRESHOLD,
            min_term_count: 1,
            seed: 0,
            significance_level: 1e-4,
            threads: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Resolves relative input paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.catalog);
        fix(&mut self.train_sessions);
        fix(&mut self.validation_sessions);
        fix(&mut self.test_sessions);
        if let Some(p) = self.embeddings.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::InvalidConfig("hyperparameter grid is empty".into()));
        }
        if self.min_pairs_per_query == 0 {
            return Err(Error::InvalidConfig("min_pairs_per_query must be at least 1".into()));
        }
        if self.modalities.is_empty() {
            return Err(Error::InvalidConfig("no modalities requested".into()));
        }
        if !(self.dwell_threshold.is_finite() && self.dwell_threshold >= 0.0) {
            return Err(Error::InvalidConfig("dwell_threshold must be finite and >= 0".into()));
        }
        if !(self.significance_level > 0.0 && self.significance_level < 1.0) {
            return Err(Error::InvalidConfig("significance_level must lie in (0, 1)".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidConfig("threads must be positive".into()));
        }
        for point in self.grid.points(self.epochs, self.seed) {
            point.validate()?;
        }
        Ok(())
    }

    /// Requested modalities, deduplicated, in text/image/multimodal order.
    pub fn ordered_modalities(&self) -> Vec<Modality> {
        let wanted: BTreeSet<Modality> = self.modalities.iter().copied().collect();
        wanted.into_iter().collect()
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}

/// In-memory experiment inputs.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub catalog: Catalog,
    pub store: Option<EmbeddingStore>,
    pub train: Vec<Session>,
    pub validation: Vec<Session>,
    pub test: Vec<Session>,
}

impl ExperimentData {
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let store = match &config.embeddings {
            Some(p) => Some(load_embedding_store(p)?),
            None => None,
        };
        Ok(ExperimentData {
            catalog: load_catalog(&config.catalog)?,
            store,
            train: load_sessions(&config.train_sessions)?,
            validation: load_sessions(&config.validation_sessions)?,
            test: load_sessions(&config.test_sessions)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDecision {
    pub query: String,
    pub chosen_modality: Modality,
    pub validation_ndcg: BTreeMap<Modality, f64>,
    pub hyperparameters: BTreeMap<Modality, TrainConfig>,
    pub test_ndcg: f64,
    pub training_pairs: usize,
}

/// Best grid point for one (query, modality).
#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub model: QueryModel,
    pub validation_ndcg: f64,
    /// Validation NDCG of every grid point, in grid order.
    pub grid_scores: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: EvalReport,
    pub decisions: Vec<QueryDecision>,
    /// Tuned model per query and modality.
    pub models: BTreeMap<String, BTreeMap<Modality, QueryModel>>,
}

/// Sessions with at least one relevant result, NDCG being undefined otherwise.
fn labeled<'a>(sessions: &[&'a Session], dwell_threshold: f64) -> Vec<&'a Session> {
    sessions
        .iter()
        .copied()
        .filter(|s| s.has_relevant(dwell_threshold))
        .collect()
}

/// Per-session NDCG of `model`; sessions with a result that cannot be
/// embedded in the model's modality are skipped and counted.
pub fn evaluate_sessions(
    model: &QueryModel,
    sessions: &[&Session],
    embedder: &Embedder<'_>,
    dwell_threshold: f64,
) -> Result<(Vec<f64>, usize)> {
    let mut scores = Vec::with_capacity(sessions.len());
    let mut skipped = 0;
    for s in sessions {
        match session_ndcg(model, s, embedder, dwell_threshold) {
            Ok(v) => scores.push(v),
            Err(Error::MissingEmbedding(_) | Error::NoImageRef(_) | Error::UnknownListing(_) | Error::ZeroIdcg) => {
                skipped += 1
            }
            Err(e) => return Err(e),
        }
    }
    Ok((scores, skipped))
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Trains every grid point and keeps the one with the best mean validation
/// NDCG; ties keep the earlier grid point.
pub fn tune(
    instances: &[PairwiseInstance],
    modality: Modality,
    grid: &[TrainConfig],
    validation: &[&Session],
    embedder: &Embedder<'_>,
    dwell_threshold: f64,
) -> Result<TuneOutcome> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("hyperparameter grid is empty".into()));
    }
    let trained = grid
        .par_iter()
        .map(|config| {
            let model = train_sgd(instances, modality, config)?;
            let (scores, _) = evaluate_sessions(&model, validation, embedder, dwell_threshold)?;
            let score = mean(&scores).ok_or(Error::Empty("no evaluable validation sessions"))?;
            Ok((model, score))
        })
        .collect::<Result<Vec<_>>>()?;
    let grid_scores: Vec<f64> = trained.iter().map(|(_, s)| *s).collect();
    let mut best = 0;
    for (i, &s) in grid_scores.iter().enumerate() {
        if s > grid_scores[best] {
            best = i;
        }
    }
    let (model, validation_ndcg) = trained.into_iter().nth(best).expect("grid is non-empty");
    Ok(TuneOutcome {
        model,
        validation_ndcg,
        grid_scores,
    })
}

/// Highest validation NDCG wins; a later modality must be strictly better,
/// so ties go to text, then image.
pub fn select_modality(validation: &BTreeMap<Modality, f64>) -> Option<Modality> {
    let mut best: Option<(Modality, f64)> = None;
    for (&m, &v) in validation {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((m, v));
        }
    }
    best.map(|(m, _)| m)
}

struct QueryJob<'a> {
    query: &'a str,
    modality: Modality,
    pairs: &'a [crate::pairgen::PreferencePair],
    validation: Vec<&'a Session>,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let data = ExperimentData::load(config)?;
    run_on(&data, config)
}

/// Runs the experiment on already-loaded inputs.
pub fn run_on(data: &ExperimentData, config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    match config.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?
            .install(|| run_inner(data, config)),
        None => run_inner(data, config),
    }
}

fn run_inner(data: &ExperimentData, config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let modalities = config.ordered_modalities();
    if modalities.iter().any(|m| m.uses_image()) && data.store.is_none() {
        return Err(Error::InvalidConfig(
            "an image-using modality was requested without an embedding store".into(),
        ));
    }
    let th = config.dwell_threshold;
    let vocab: Vocabulary = build_vocabulary(&data.catalog, config.min_term_count)?;
    let embedder = Embedder::new(&data.catalog, &vocab, data.store.as_ref());

    let pairs = pairs_by_query(mine_preference_pairs(&data.train, th));
    let validation = group_by_query(&data.validation);
    let test = group_by_query(&data.test);

    let mut skipped_queries = BTreeMap::new();
    let mut eligible: Vec<&str> = Vec::new();
    let all_queries: BTreeSet<&str> = data
        .train
        .iter()
        .chain(&data.validation)
        .chain(&data.test)
        .map(|s| s.query.as_str())
        .collect();
    for q in all_queries {
        let n_pairs = pairs.get(q).map_or(0, Vec::len);
        let n_valid = validation.get(q).map_or(0, |v| labeled(v, th).len());
        let n_test = test.get(q).map_or(0, |v| labeled(v, th).len());
        let reason = if n_pairs < config.min_pairs_per_query {
            Some(format!(
                "insufficient training pairs ({n_pairs} < {})",
                config.min_pairs_per_query
            ))
        } else if n_valid == 0 {
            Some("no validation sessions with a relevant result".to_string())
        } else if n_test == 0 {
            Some("no test sessions with a relevant result".to_string())
        } else {
            None
        };
        match reason {
            Some(r) => {
                log::info!("skipping query `{q}`: {r}");
                skipped_queries.insert(q.to_string(), r);
            }
            None => eligible.push(q),
        }
    }
    if eligible.is_empty() {
        return Err(Error::NoEligibleQueries {
            min_pairs: config.min_pairs_per_query,
        });
    }

    let jobs: Vec<QueryJob<'_>> = eligible
        .iter()
        .flat_map(|&q| {
            let pairs = &pairs[q];
            let validation = labeled(&validation[q], th);
            modalities.iter().map(move |&m| QueryJob {
                query: q,
                modality: m,
                pairs,
                validation: validation.clone(),
            })
        })
        .collect();

    let results: Vec<std::result::Result<TuneOutcome, String>> = jobs
        .par_iter()
        .map(|job| {
            let seed = derive_seed(config.seed, job.query);
            let set = make_instances(job.pairs, &embedder, job.modality, seed);
            let grid = config.grid.points(config.epochs, seed);
            if set.instances.is_empty() {
                return Err("no embeddable training pairs".to_string());
            }
            tune(&set.instances, job.modality, &grid, &job.validation, &embedder, th)
                .map_err(|e| e.to_string())
        })
        .collect();

    let mut models: BTreeMap<String, BTreeMap<Modality, QueryModel>> = BTreeMap::new();
    let mut val_scores: BTreeMap<String, BTreeMap<Modality, f64>> = BTreeMap::new();
    let mut notes = Vec::new();
    for (job, result) in jobs.iter().zip(results) {
        match result {
            Ok(t) => {
                val_scores
                    .entry(job.query.to_string())
                    .or_default()
                    .insert(job.modality, t.validation_ndcg);
                models
                    .entry(job.query.to_string())
                    .or_default()
                    .insert(job.modality, t.model);
            }
            Err(e) => notes.push(format!("{} model for `{}` not trained: {e}", job.modality, job.query)),
        }
    }
    for &q in &eligible {
        if !models.contains_key(q) {
            skipped_queries.insert(q.to_string(), "no modality could be trained".to_string());
        }
    }

    // Test evaluation per (query, modality), in parallel, collected in order.
    let eval_keys: Vec<(&str, Modality)> = models
        .iter()
        .flat_map(|(q, by_m)| by_m.keys().map(move |&m| (q.as_str(), m)))
        .collect();
    let test_results = eval_keys
        .par_iter()
        .map(|&(q, m)| {
            let sessions = labeled(&test[q], th);
            evaluate_sessions(&models[q][&m], &sessions, &embedder, th)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut test_by_column: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut skipped_sessions: BTreeMap<String, usize> = BTreeMap::new();
    let mut test_by_qm: BTreeMap<(&str, Modality), Vec<f64>> = BTreeMap::new();
    for (&(q, m), (scores, skipped)) in eval_keys.iter().zip(test_results) {
        *skipped_sessions.entry(m.as_str().to_string()).or_default() += skipped;
        if scores.is_empty() {
            notes.push(format!("{m} model for `{q}` has no evaluable test sessions"));
            continue;
        }
        test_by_column
            .entry(m.as_str().to_string())
            .or_default()
            .insert(q.to_string(), scores.clone());
        test_by_qm.insert((q, m), scores);
    }

    let mut decisions = Vec::new();
    let mut selected_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut validation_by_column: BTreeMap<String, BTreeMap<String, QueryScore>> = BTreeMap::new();
    for (q, by_m) in &val_scores {
        for (&m, &v) in by_m {
            validation_by_column
                .entry(m.as_str().to_string())
                .or_default()
                .insert(q.clone(), QueryScore { mean_ndcg: v, sessions: labeled(&validation[q.as_str()], th).len() });
        }
        let chosen = select_modality(by_m).expect("at least one modality trained");
        let chosen_score = validation_by_column[chosen.as_str()][q];
        validation_by_column
            .entry(SELECTED_COLUMN.to_string())
            .or_default()
            .insert(q.clone(), chosen_score);
        let Some(test_scores) = test_by_qm.get(&(q.as_str(), chosen)) else {
            skipped_queries.insert(q.clone(), format!("selected {chosen} model has no evaluable test sessions"));
            continue;
        };
        *selected_counts.entry(chosen.as_str().to_string()).or_default() += 1;
        test_by_column
            .entry(SELECTED_COLUMN.to_string())
            .or_default()
            .insert(q.clone(), test_scores.clone());
        decisions.push(QueryDecision {
            query: q.clone(),
            chosen_modality: chosen,
            validation_ndcg: by_m.clone(),
            hyperparameters: models[q].iter().map(|(&m, model)| (m, model.train_config.clone())).collect(),
            test_ndcg: mean(test_scores).expect("non-empty"),
            training_pairs: pairs[q.as_str()].len(),
        });
    }

    let mut columns: Vec<String> = modalities
        .iter()
        .map(|m| m.as_str().to_string())
        .filter(|c| test_by_column.contains_key(c))
        .collect();
    if test_by_column.contains_key(SELECTED_COLUMN) {
        columns.push(SELECTED_COLUMN.to_string());
    }

    let mut per_query = BTreeMap::new();
    let mut modality_means = BTreeMap::new();
    for c in &columns {
        let agg = aggregate(&test_by_column[c])?;
        modality_means.insert(c.clone(), agg.mean);
        per_query.insert(c.clone(), agg.per_query);
    }
    let validation_means: BTreeMap<String, f64> = validation_by_column
        .iter()
        .map(|(c, qs)| (c.clone(), qs.values().map(|s| s.mean_ndcg).sum::<f64>() / qs.len() as f64))
        .collect();

    let baseline = Modality::Text.as_str();
    let mut lifts = BTreeMap::new();
    let mut significance = BTreeMap::new();
    if let Some(base) = per_query.get(baseline) {
        for c in columns.iter().filter(|c| c.as_str() != baseline) {
            // Lift and test over the queries both columns evaluated.
            let paired: Vec<(f64, f64)> = per_query[c]
                .iter()
                .filter_map(|(q, s)| base.get(q).map(|b| (b.mean_ndcg, s.mean_ndcg)))
                .collect();
            if paired.is_empty() {
                continue;
            }
            let base_mean = paired.iter().map(|p| p.0).sum::<f64>() / paired.len() as f64;
            let cand_mean = paired.iter().map(|p| p.1).sum::<f64>() / paired.len() as f64;
            match relative_lift(cand_mean, base_mean) {
                Ok(l) => {
                    lifts.insert(c.clone(), l);
                }
                Err(e) => notes.push(format!("no lift for {c}: {e}")),
            }
            match wilcoxon_signed_rank(&paired) {
                Ok(w) => {
                    significance.insert(c.clone(), w);
                }
                Err(Error::AllZeroDifferences) => {
                    notes.push(format!("{c} matches text on every query; no significance test"))
                }
                Err(e) => return Err(e),
            }
        }
    } else {
        notes.push("text modality not evaluated; lifts omitted".to_string());
    }

    let multimodal_preference_fraction = {
        let both: Vec<bool> = val_scores
            .values()
            .filter_map(|m| Some(m.get(&Modality::Multimodal)? > m.get(&Modality::Text)?))
            .collect();
        (!both.is_empty()).then(|| both.iter().filter(|&&b| b).count() as f64 / both.len() as f64)
    };

    let report = EvalReport {
        columns,
        per_query,
        validation_per_query: validation_by_column,
        modality_means,
        validation_means,
        lifts,
        significance,
        significance_level: config.significance_level,
        multimodal_preference_fraction,
        selected_counts,
        skipped_queries,
        skipped_sessions,
        notes,
    };
    Ok(ExperimentOutcome {
        report,
        decisions,
        models,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance record written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    /// sha256 of each input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new<P: AsRef<Path>>(
        command: &str,
        config_json: &str,
        seed: u64,
        inputs: impl IntoIterator<Item = P>,
    ) -> Result<Self> {
        let mut digests = BTreeMap::new();
        for p in inputs {
            let p = p.as_ref();
            digests.insert(p.display().to_string(), sha256_hex(&std::fs::read(p)?));
        }
        Ok(RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: sha256_hex(config_json.as_bytes()),
            seed,
            inputs: digests,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuumEntry {
    /// 0-based position in the full ranking.
    pub rank: usize,
    pub listing_id: String,
    pub score: f64,
    pub image_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuumBand {
    pub percentile: f64,
    pub start_rank: usize,
    pub listings: Vec<ContinuumEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuumReport {
    pub query: String,
    pub modality: Modality,
    pub n_listings: usize,
    pub bands: Vec<ContinuumBand>,
}

pub const DEFAULT_PERCENTILES: [f64; 5] = [90.0, 80.0, 70.0, 60.0, 50.0];

/// Ranks the listings shown in `sessions` and cuts a `band_size` window
/// starting at each percentile. The band for percentile `p` starts at index
/// `round((100 - p) / 100 * n)`; bands that land on the same start collapse.
pub fn continuum_report(
    model: &QueryModel,
    sessions: &[&Session],
    embedder: &Embedder<'_>,
    percentiles: &[f64],
    band_size: usize,
) -> Result<ContinuumReport> {
    if percentiles.iter().any(|p| !(0.0..=100.0).contains(p)) {
        return Err(Error::InvalidConfig("percentiles must lie in [0, 100]".into()));
    }
    if band_size == 0 {
        return Err(Error::InvalidConfig("band_size must be positive".into()));
    }
    let ids: BTreeSet<&str> = sessions
        .iter()
        .flat_map(|s| s.presented.iter().map(|r| r.listing_id.as_str()))
        .collect();
    let docs = ids
        .iter()
        .filter_map(|&id| match embedder.embed(id, model.modality) {
            Ok(v) => Some(Ok((id, v))),
            Err(Error::MissingEmbedding(_) | Error::NoImageRef(_) | Error::UnknownListing(_)) => {
                log::warn!("continuum: skipping `{id}`, not embeddable as {}", model.modality);
                None
            }
            Err(e) => Some(Err(e)),
        })
        .collect::<Result<Vec<_>>>()?;
    if docs.is_empty() {
        return Err(Error::Empty("no listings to rank"));
    }
    let ranked = rank(model, &docs)?;
    let n = ranked.len();
    let mut seen_starts = BTreeSet::new();
    let mut bands = Vec::new();
    for &p in percentiles {
        let start = (((100.0 - p) / 100.0 * n as f64).round() as usize).min(n - 1);
        if !seen_starts.insert(start) {
            log::warn!("continuum: percentile {p} collapses onto an earlier band at rank {start}");
            continue;
        }
        let listings = ranked[start..(start + band_size).min(n)]
            .iter()
            .enumerate()
            .map(|(k, (id, score))| ContinuumEntry {
                rank: start + k,
                listing_id: id.clone(),
                score: *score,
                image_ref: embedder.catalog.get(id).and_then(|l| l.image_ref.clone()),
            })
            .collect();
        bands.push(ContinuumBand {
            percentile: p,
            start_rank: start,
            listings,
        });
    }
    Ok(ContinuumReport {
        query: model.query.clone(),
        modality: model.modality,
        n_listings: n,
        bands,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentangleEntry {
    pub left: String,
    pub right: String,
    pub shared_terms: usize,
    /// `|rank(left) - rank(right)|` under each model.
    pub delta_a: usize,
    pub delta_b: usize,
}

pub const DEFAULT_MIN_SHARED_TERMS: usize = 3;

fn title_terms(catalog: &Catalog, id: &str) -> BTreeSet<String> {
    catalog
        .get(id)
        .map(|l| tokenize(&l.title).into_iter().collect())
        .unwrap_or_default()
}

/// Pairs of listings whose titles share at least `min_shared_terms` unigrams,
/// with their rank distance under each model. Sorted so pairs close under
/// `model_a` and far apart under `model_b` come first.
pub fn disentangle_report(
    model_a: &QueryModel,
    model_b: &QueryModel,
    listing_ids: &[String],
    embedder: &Embedder<'_>,
    min_shared_terms: usize,
) -> Result<Vec<DisentangleEntry>> {
    let positions = |model: &QueryModel| -> Result<BTreeMap<String, usize>> {
        let docs = listing_ids
            .iter()
            .map(|id| Ok((id.as_str(), embedder.embed(id, model.modality)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(rank(model, &docs)?
            .into_iter()
            .enumerate()
            .map(|(i, (id, _))| (id, i))
            .collect())
    };
    let pos_a = positions(model_a)?;
    let pos_b = positions(model_b)?;
    let ids: Vec<&String> = pos_a.keys().collect();
    let terms: Vec<BTreeSet<String>> = ids.iter().map(|id| title_terms(embedder.catalog, id)).collect();

    let mut out = Vec::new();
    for i in 0..ids.len() {
        for j in (i + 1)..ids.len() {
            let shared = terms[i].intersection(&terms[j]).count();
            if shared < min_shared_terms {
                continue;
            }
            out.push(DisentangleEntry {
                left: ids[i].clone(),
                right: ids[j].clone(),
                shared_terms: shared,
                delta_a: pos_a[ids[i]].abs_diff(pos_a[ids[j]]),
                delta_b: pos_b[ids[i]].abs_diff(pos_b[ids[j]]),
            });
        }
    }
    out.sort_by(|x, y| {
        x.delta_a
            .cmp(&y.delta_a)
            .then(y.delta_b.cmp(&x.delta_b))
            .then_with(|| x.left.cmp(&y.left))
            .then_with(|| x.right.cmp(&y.right))
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthlog::{generate_sessions, generate_world, split_sessions, World, WorldSpec};

    fn small_world(spec: WorldSpec) -> (World, ExperimentData) {
        let world = generate_world(&spec).unwrap();
        let sessions = generate_sessions(&world, &spec).unwrap();
        let split = split_sessions(sessions, spec.train_fraction, spec.validation_fraction);
        let data = ExperimentData {
            catalog: world.catalog.clone(),
            store: Some(world.store.clone()),
            train: split.train,
            validation: split.validation,
            test: split.test,
        };
        (world, data)
    }

    fn small_spec() -> WorldSpec {
        WorldSpec {
            n_queries: 4,
            n_listings_per_query: 60,
            n_sessions_per_query: 120,
            ..WorldSpec::default()
        }
    }

    fn quick_config() -> ExperimentConfig {
        ExperimentConfig {
            grid: GridSpec {
                learning_rate: vec![0.1],
                lr_decay: vec![1e-4],
                lambda1: vec![0.0],
                lambda2: vec![1e-6, 1e-4],
            },
            min_pairs_per_query: 10,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn grid_points_order_and_size() {
        let grid = GridSpec::default();
        assert_eq!(grid.len(), 12);
        let pts = grid.points(5, 1);
        assert_eq!(pts.len(), 12);
        assert_eq!((pts[0].learning_rate, pts[0].lambda1, pts[0].lambda2), (0.1, 0.0, 1e-6));
        assert_eq!((pts[1].lambda2, pts[11].learning_rate), (1e-4, 0.01));
    }

    #[test]
    fn config_toml_round_trip_and_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 9\nmodalities = [\"text\", \"multimodal\"]\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.min_pairs_per_query, 50);
        assert_eq!(cfg.grid, GridSpec::default());
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(ExperimentConfig::from_toml("epochs = \"x\"").is_err());
    }

    #[test]
    fn invalid_configs() {
        let empty_grid = ExperimentConfig {
            grid: GridSpec { lambda1: vec![], ..GridSpec::default() },
            ..ExperimentConfig::default()
        };
        assert!(empty_grid.validate().is_err());
        let zero_pairs = ExperimentConfig { min_pairs_per_query: 0, ..ExperimentConfig::default() };
        assert!(zero_pairs.validate().is_err());
    }

    #[test]
    fn selection_prefers_text_on_ties() {
        let mut v = BTreeMap::new();
        v.insert(Modality::Text, 0.5);
        v.insert(Modality::Image, 0.5);
        v.insert(Modality::Multimodal, 0.5);
        assert_eq!(select_modality(&v), Some(Modality::Text));
        v.insert(Modality::Multimodal, 0.51);
        assert_eq!(select_modality(&v), Some(Modality::Multimodal));
        v.insert(Modality::Image, 0.6);
        assert_eq!(select_modality(&v), Some(Modality::Image));
        assert_eq!(select_modality(&BTreeMap::new()), None);
    }

    #[test]
    fn single_point_grid_trains_once() {
        let (_, data) = small_world(small_spec());
        let cfg = ExperimentConfig {
            grid: GridSpec::single(&TrainConfig::default()),
            ..quick_config()
        };
        let out = run_on(&data, &cfg).unwrap();
        for d in &out.decisions {
            for hp in d.hyperparameters.values() {
                assert_eq!(hp.learning_rate, 0.1);
                assert_eq!(hp.lambda2, 1e-6);
            }
        }
    }

    #[test]
    fn decisions_are_argmax_and_selection_dominates_on_validation() {
        let (_, data) = small_world(small_spec());
        let out = run_on(&data, &quick_config()).unwrap();
        assert!(!out.decisions.is_empty());
        for d in &out.decisions {
            let best = d.validation_ndcg.values().cloned().fold(f64::MIN, f64::max);
            assert_eq!(d.validation_ndcg[&d.chosen_modality], best);
        }
        let sel = out.report.validation_means[SELECTED_COLUMN];
        for m in Modality::ALL {
            assert!(sel >= out.report.validation_means[m.as_str()] - 1e-12);
        }
        assert_eq!(
            out.report.columns,
            vec!["text", "image", "multimodal", "selected"]
        );
        let f = out.report.multimodal_preference_fraction.unwrap();
        assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn under_threshold_queries_are_reported_as_skipped() {
        let (_, data) = small_world(small_spec());
        let cfg = ExperimentConfig {
            min_pairs_per_query: 1_000_000,
            ..quick_config()
        };
        assert!(matches!(run_on(&data, &cfg), Err(Error::NoEligibleQueries { .. })));

        // One query starved of training sessions.
        let mut data2 = data.clone();
        let starved = data2.train[0].query.clone();
        data2.train.retain(|s| s.query != starved);
        let out = run_on(&data2, &quick_config()).unwrap();
        assert!(out.report.skipped_queries[&starved].contains("insufficient training pairs"));
        assert!(!out.report.per_query["text"].contains_key(&starved));
    }

    #[test]
    fn image_modality_without_store_is_an_error() {
        let (_, mut data) = small_world(small_spec());
        data.store = None;
        assert!(matches!(run_on(&data, &quick_config()), Err(Error::InvalidConfig(_))));
        let text_only = ExperimentConfig {
            modalities: vec![Modality::Text],
            ..quick_config()
        };
        let out = run_on(&data, &text_only).unwrap();
        assert_eq!(out.report.columns, vec!["text", "selected"]);
    }

    #[test]
    fn thread_count_does_not_change_report() {
        let (_, data) = small_world(small_spec());
        let one = run_on(&data, &ExperimentConfig { threads: Some(1), ..quick_config() }).unwrap();
        let four = run_on(&data, &ExperimentConfig { threads: Some(4), ..quick_config() }).unwrap();
        assert_eq!(one.report.to_json().unwrap(), four.report.to_json().unwrap());
    }

    fn toy_model(query: &str) -> (World, Vocabulary, QueryModel) {
        let spec = WorldSpec {
            n_queries: 1,
            n_listings_per_query: 100,
            n_sessions_per_query: 10,
            ..WorldSpec::default()
        };
        let world = generate_world(&spec).unwrap();
        let vocab = build_vocabulary(&world.catalog, 1).unwrap();
        let embedder = Embedder::new(&world.catalog, &vocab, Some(&world.store));
        let layout = embedder.layout(Modality::Text);
        // Score listing j by -j through its listing-id column.
        let mut flat = vec![0.0; layout.logical_dim()];
        for (j, id) in world.pools[0].listings.iter().enumerate() {
            flat[vocab.listing(id).unwrap()] = -(j as f64);
        }
        let model = QueryModel {
            query: query.to_string(),
            modality: Modality::Text,
            weights: crate::ranksvm::LinearWeights::from_flat(layout, &flat),
            train_config: TrainConfig::default(),
            train_stats: crate::ranksvm::TrainStats {
                epochs_run: 0,
                steps: 0,
                final_objective: 0.0,
                instance_count: 0,
            },
        };
        (world, vocab, model)
    }

    #[test]
    fn continuum_percentile_arithmetic() {
        let (world, vocab, model) = toy_model("q");
        let embedder = Embedder::new(&world.catalog, &vocab, Some(&world.store));
        let session = Session {
            query: "q".into(),
            presented: world.pools[0]
                .listings
                .iter()
                .map(|id| crate::corpus::PresentedResult {
                    listing_id: id.clone(),
                    interaction: crate::corpus::Interaction::ignored(),
                })
                .collect(),
            timestamp: 0,
            fairpairs_flag: true,
        };
        let report = continuum_report(&model, &[&session], &embedder, &[90.0], 5).unwrap();
        assert_eq!(report.n_listings, 100);
        assert_eq!(report.bands.len(), 1);
        assert_eq!(report.bands[0].start_rank, 10);
        assert_eq!(report.bands[0].listings[0].listing_id, world.pools[0].listings[10]);
        assert_eq!(
            report.bands[0].listings[0].image_ref.as_deref(),
            Some(format!("img-{}", world.pools[0].listings[10]).as_str())
        );

        let single = continuum_report(&model, &[&session], &embedder, &[50.0], 5).unwrap();
        assert_eq!(single.bands.len(), 1);

        let short = Session {
            presented: session.presented[..2].to_vec(),
            ..session.clone()
        };
        let collapsed =
            continuum_report(&model, &[&short], &embedder, &DEFAULT_PERCENTILES, 5).unwrap();
        assert!(collapsed.bands.len() < DEFAULT_PERCENTILES.len());

        let empty = Session { presented: vec![], ..session };
        assert!(continuum_report(&model, &[&empty], &embedder, &[90.0], 5).is_err());
    }

    #[test]
    fn disentangle_identical_models_and_large_k() {
        let (world, vocab, model) = toy_model("q");
        let embedder = Embedder::new(&world.catalog, &vocab, Some(&world.store));
        let ids = world.pools[0].listings.clone();
        let entries = disentangle_report(&model, &model, &ids, &embedder, 3).unwrap();
        assert!(!entries.is_empty());
        assert!(entries.iter().all(|e| e.delta_a == e.delta_b && e.shared_terms >= 3));
        assert!(entries.windows(2).all(|w| w[0].delta_a <= w[1].delta_a));
        assert!(disentangle_report(&model, &model, &ids, &embedder, 100).unwrap().is_empty());
    }

    #[test]
    fn multimodal_separates_conflated_pairs() {
        let spec = WorldSpec {
            n_queries: 1,
            n_listings_per_query: 80,
            n_sessions_per_query: 400,
            text_ambiguity: 1.0,
            image_signal: 4.0,
            ..WorldSpec::default()
        };
        let (world, data) = small_world(spec);
        let cfg = ExperimentConfig {
            modalities: vec![Modality::Text, Modality::Multimodal],
            ..quick_config()
        };
        let out = run_on(&data, &cfg).unwrap();
        let q = &world.pools[0].query;
        let models = &out.models[q];
        let vocab = build_vocabulary(&data.catalog, 1).unwrap();
        let embedder = Embedder::new(&data.catalog, &vocab, data.store.as_ref());
        let ids = world.pools[0].listings.clone();
        let entries = disentangle_report(
            &models[&Modality::Text],
            &models[&Modality::Multimodal],
            &ids,
            &embedder,
            DEFAULT_MIN_SHARED_TERMS,
        )
        .unwrap();
        let conflated: Vec<&DisentangleEntry> = entries
            .iter()
            .filter(|e| world.truth.relevance(q, &e.left) != world.truth.relevance(q, &e.right))
            .collect();
        assert!(!conflated.is_empty());
        let mean = |f: fn(&DisentangleEntry) -> usize| {
            conflated.iter().map(|e| f(e) as f64).sum::<f64>() / conflated.len() as f64
        };
        assert!(mean(|e| e.delta_b) > mean(|e| e.delta_a));
    }

    #[test]
    fn manifest_digests_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, b"abc").unwrap();
        let m = RunManifest::new("test", "{}", 3, [&input]).unwrap();
        assert_eq!(
            m.inputs[&input.display().to_string()],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(m.seed, 3);
        assert_eq!(m.config_hash, sha256_hex(b"{}"));
    }
}
