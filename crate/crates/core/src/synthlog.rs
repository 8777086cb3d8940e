//! Synthetic catalogs and search logs with known ground truth.
//!
//! Each query owns a pool of listings, a fraction of which are truly relevant.
//! Relevant listings carry the query's terms in their titles; a
//! `text_ambiguity` fraction of the irrelevant ones copy those terms verbatim
//! (term noise), the rest are off-topic. Image vectors come from two spherical
//! Gaussians whose means sit `image_signal` apart along a random per-query
//! direction. With a zero signal both classes share one image distribution.
//!
//! Sessions show a random page, apply FairPairs randomization and simulate a
//! user with per-position examination probabilities. Within a randomized pair
//! both listings share one examination draw taken at the pair's upper
//! position, which is the assumption under which FairPairs preferences are
//! free of presentation bias.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    write_catalog, write_sessions, Catalog, Interaction, Listing, PresentedResult, Session,
};
use crate::embedding::{DenseVector, EmbeddingStore, Modality};
use crate::error::{Error, Result};
use crate::pairgen::derive_seed;

const ADJECTIVES: [&str; 16] = [
    "red", "blue", "green", "black", "white", "golden", "silver", "pink", "rustic", "modern",
    "wooden", "leather", "linen", "velvet", "copper", "floral",
];
const NOUNS: [&str; 24] = [
    "desk", "lamp", "necklace", "dress", "bag", "ring", "mug", "scarf", "poster", "candle",
    "quilt", "wallet", "bracelet", "pillow", "vase", "shirt", "hat", "rug", "clock", "mirror",
    "earrings", "journal", "planter", "blanket",
];
const STYLES: [&str; 12] = [
    "handmade", "boho", "minimalist", "retro", "personalized", "custom", "artisan", "classic",
    "chunky", "dainty", "oversized", "farmhouse",
];
const OFF_TOPIC: [&str; 20] = [
    "sticker", "keychain", "magnet", "patch", "pin", "coaster", "bookmark", "ornament",
    "figurine", "print", "card", "badge", "charm", "button", "decal", "tote", "apron", "mask",
    "sock", "glove",
];

/// Norm of the per-query offset shared by both image classes.
const IMAGE_OFFSET_NORM: f64 = 2.0;
const BASE_TIMESTAMP: i64 = 1_700_000_000;
const LONG_DWELL_SECONDS: f64 = 45.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub n_queries: usize,
    pub n_listings_per_query: usize,
    pub n_sessions_per_query: usize,
    /// Fraction of irrelevant listings whose titles copy the query terms.
    pub text_ambiguity: f64,
    /// Distance between the class-conditional image means.
    pub image_signal: f64,
    /// Examination probability per page position; its length is the page size.
    pub position_bias: Vec<f64>,
    pub seed: u64,
    pub relevant_fraction: f64,
    pub image_dim: usize,
    pub fairpairs: bool,
    /// Catalog turnover: when set, listings arrive in pool order and each
    /// session's page is drawn from a window of this many live listings that
    /// slides from the oldest to the newest over the session timeline. `None`
    /// keeps every listing live for every session.
    pub live_listings: Option<usize>,
    /// Probability that a listing's shop comes from the half of the query's
    /// shops that specializes in its class; otherwise any shop.
    pub shop_affinity: f64,
    /// Shares of each query's sessions written to the training and validation
    /// files; the remainder is the test file.
    pub train_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_queries: 20,
            n_listings_per_query: 200,
            n_sessions_per_query: 500,
            text_ambiguity: 0.6,
            image_signal: 2.0,
            position_bias: vec![1.0, 0.9, 0.8, 0.7, 0.6, 0.55, 0.5, 0.45, 0.4, 0.35],
            seed: 7,
            relevant_fraction: 0.5,
            image_dim: 32,
            fairpairs: true,
            live_listings: Some(20),
            shop_affinity: 0.0,
            train_fraction: 0.4,
            validation_fraction: 0.2,
        }
    }
}

impl WorldSpec {
    pub fn page_size(&self) -> usize {
        self.position_bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.n_queries == 0 || self.n_listings_per_query == 0 || self.n_sessions_per_query == 0 {
            return bad("query, listing and session counts must be positive");
        }
        for (name, p) in [
            ("text_ambiguity", self.text_ambiguity),
            ("relevant_fraction", self.relevant_fraction),
            ("shop_affinity", self.shop_affinity),
            ("train_fraction", self.train_fraction),
            ("validation_fraction", self.validation_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.train_fraction + self.validation_fraction > 1.0 {
            return bad("train_fraction + validation_fraction exceeds 1");
        }
        if !self.image_signal.is_finite() || self.image_signal < 0.0 {
            return bad("image_signal must be a non-negative number");
        }
        if self.image_dim == 0 {
            return bad("image_dim must be positive");
        }
        if self.position_bias.is_empty() {
            return bad("position_bias must list at least one position");
        }
        if self.position_bias.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("examination probabilities must lie in [0, 1]");
        }
        if self.position_bias.windows(2).any(|w| w[1] > w[0]) {
            return bad("examination probabilities must be non-increasing in position");
        }
        if self.page_size() > self.n_listings_per_query {
            return bad("page size exceeds listings per query");
        }
        if let Some(w) = self.live_listings {
            if w < self.page_size() || w > self.n_listings_per_query {
                return bad("live_listings must lie between the page size and listings per query");
            }
        }
        Ok(())
    }
}

/// True relevance by query, then listing id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub true_relevance: BTreeMap<String, BTreeMap<String, u8>>,
}

impl GroundTruth {
    pub fn relevance(&self, query: &str, listing_id: &str) -> Option<u8> {
        self.true_relevance.get(query)?.get(listing_id).copied()
    }
}

/// A query's listings (in arrival order) and the parameters they were drawn from.
#[derive(Debug, Clone)]
pub struct QueryPool {
    pub query: String,
    pub listings: Vec<String>,
    pub on_topic_title: String,
    pub n_relevant: usize,
    pub n_shops: usize,
    /// Shared image mean; relevant listings sit at `offset + s/2 * direction`,
    /// irrelevant ones at `offset - s/2 * direction`.
    pub image_offset: Vec<f64>,
    pub image_direction: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct World {
    pub catalog: Catalog,
    pub store: EmbeddingStore,
    pub truth: GroundTruth,
    pub pools: Vec<QueryPool>,
    pub spec: WorldSpec,
}

/// Deterministic query string for the `i`-th query.
pub fn query_name(i: usize) -> String {
    let adj = ADJECTIVES[i % ADJECTIVES.len()];
    // 17 is coprime with 24, so (adjective, noun) pairs stay distinct for 384 queries.
    let noun = NOUNS[(i / ADJECTIVES.len() + 7 * i) % NOUNS.len()];
    let round = i / (ADJECTIVES.len() * NOUNS.len());
    if round == 0 {
        format!("{adj} {noun}")
    } else {
        format!("{adj} {noun} v{round}")
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, dim);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut listings = Vec::new();
    let mut store = EmbeddingStore::new(spec.image_dim);
    let mut truth = GroundTruth::default();
    let mut pools = Vec::with_capacity(spec.n_queries);
    let n = spec.n_listings_per_query;
    let n_shops = (n / 4).max(2);
    let shop_split = n_shops / 2;

    for qi in 0..spec.n_queries {
        let query = query_name(qi);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("world/{query}")));
        let on_topic_title = format!(
            "{query} {} {}",
            STYLES[qi % STYLES.len()],
            STYLES[(qi + 5) % STYLES.len()]
        );
        let noun = query.split(' ').nth(1).unwrap_or(&query).to_string();
        let on_topic_tags = vec![noun, STYLES[qi % STYLES.len()].to_string()];

        let n_relevant = (spec.relevant_fraction * n as f64).round() as usize;
        let mut is_relevant: Vec<bool> = (0..n).map(|j| j < n_relevant).collect();
        is_relevant.shuffle(&mut rng);

        let direction = unit_vec(&mut rng, spec.image_dim);
        let offset: Vec<f64> = unit_vec(&mut rng, spec.image_dim)
            .into_iter()
            .map(|x| x * IMAGE_OFFSET_NORM)
            .collect();
        let half = spec.image_signal / 2.0;

        let mut labels = BTreeMap::new();
        let mut ids = Vec::with_capacity(n);
        for (j, &relevant) in is_relevant.iter().enumerate() {
            let listing_id = format!("q{qi:03}-l{j:04}");
            let shop = if rng.random::<f64>() < spec.shop_affinity {
                if relevant {
                    rng.random_range(0..shop_split)
                } else {
                    rng.random_range(shop_split..n_shops)
                }
            } else {
                rng.random_range(0..n_shops)
            };
            let shop_id = format!("q{qi:03}-s{shop:03}");
            let ambiguous = !relevant && rng.random::<f64>() < spec.text_ambiguity;
            let (title, tags) = if relevant || ambiguous {
                (on_topic_title.clone(), on_topic_tags.clone())
            } else {
                let a = OFF_TOPIC[rng.random_range(0..OFF_TOPIC.len())];
                let b = OFF_TOPIC[rng.random_range(0..OFF_TOPIC.len())];
                let style = STYLES[rng.random_range(0..STYLES.len())];
                (format!("{style} {a} {b}"), vec![a.to_string()])
            };
            let sign = if relevant { 1.0 } else { -1.0 };
            let noise = gaussian_vec(&mut rng, spec.image_dim);
            let dense: Vec<f64> = noise
                .iter()
                .zip(&offset)
                .zip(&direction)
                .map(|((e, c), u)| c + sign * half * u + e)
                .collect();
            let image_ref = format!("img-{listing_id}");
            store.insert(image_ref.clone(), DenseVector::new(dense))?;
            listings.push(Listing {
                listing_id: listing_id.clone(),
                shop_id,
                title,
                tags,
                image_ref: Some(image_ref),
            });
            labels.insert(listing_id.clone(), u8::from(relevant));
            ids.push(listing_id);
        }
        truth.true_relevance.insert(query.clone(), labels);
        pools.push(QueryPool {
            query,
            listings: ids,
            on_topic_title,
            n_relevant,
            n_shops,
            image_offset: offset,
            image_direction: direction,
        });
    }

    let mut catalog = Catalog::from_listings(listings)?;
    catalog
        .source_meta
        .push(format!("synthetic world, seed {}", spec.seed));
    Ok(World {
        catalog,
        store,
        truth,
        pools,
        spec: spec.clone(),
    })
}

impl World {
    pub fn pool(&self, query: &str) -> Option<&QueryPool> {
        self.pools.iter().find(|p| p.query == query)
    }

    /// Exact log posterior odds that `listing_id` is relevant to `query`
    /// given the features of `modality`, under the generating model. Text
    /// evidence is the title (on-topic or not) and the shop; image evidence
    /// is the raw vector. Ranking by this score is the Bayes ranker for the
    /// modality. Off-topic listings get negative infinity.
    pub fn log_posterior_odds(&self, query: &str, listing_id: &str, modality: Modality) -> Result<f64> {
        let pool = self
            .pool(query)
            .ok_or_else(|| Error::UnknownListing(format!("query `{query}`")))?;
        let listing = self
            .catalog
            .get(listing_id)
            .ok_or_else(|| Error::UnknownListing(listing_id.to_string()))?;
        let spec = &self.spec;
        let n = pool.listings.len() as f64;
        let prior = pool.n_relevant as f64 / n;
        if prior == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        if prior == 1.0 {
            return Ok(f64::INFINITY);
        }
        let mut odds = (prior / (1.0 - prior)).ln();

        if modality.uses_text() {
            if listing.title != pool.on_topic_title {
                return Ok(f64::NEG_INFINITY);
            }
            // P(on-topic | relevant) = 1, P(on-topic | irrelevant) = ambiguity.
            odds -= spec.text_ambiguity.ln();
            let shop: usize = listing
                .shop_id
                .rsplit('s')
                .next()
                .and_then(|k| k.parse().ok())
                .ok_or_else(|| {
                    Error::InvalidConfig(format!("listing `{listing_id}` has a shop id the generator did not produce"))
                })?;
            let split = pool.n_shops / 2;
            let uniform = (1.0 - spec.shop_affinity) / pool.n_shops as f64;
            let p_rel = uniform + if shop < split { spec.shop_affinity / split as f64 } else { 0.0 };
            let p_irr = uniform
                + if shop >= split { spec.shop_affinity / (pool.n_shops - split) as f64 } else { 0.0 };
            odds += (p_rel / p_irr).ln();
        }
        if modality.uses_image() {
            let image_ref = listing
                .image_ref
                .as_deref()
                .ok_or_else(|| Error::NoImageRef(listing_id.to_string()))?;
            let x = self
                .store
                .get(image_ref)
                .ok_or_else(|| Error::MissingEmbedding(image_ref.to_string()))?;
            // Unit-variance Gaussians: log LR = s * <u, x - c>.
            let proj: f64 = x
                .values()
                .iter()
                .zip(&pool.image_offset)
                .zip(&pool.image_direction)
                .map(|((xi, c), u)| (xi - c) * u)
                .sum();
            odds += spec.image_signal * proj;
        }
        Ok(odds)
    }
}

/// Which adjacent positions were randomized together and whether each pair was swapped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FairPairsTrace {
    /// 0 pairs positions (0,1),(2,3)..; 1 pairs (1,2),(3,4)..
    pub phase: usize,
    pub pairs: Vec<(usize, usize)>,
    pub swapped: Vec<bool>,
}

/// Randomizes adjacent pairs: a coin picks the pairing phase, then each pair is
/// swapped with probability 1/2. Nothing moves more than one position.
pub fn fairpairs_shuffle_traced<T: Clone, R: Rng + ?Sized>(
    results: &[T],
    rng: &mut R,
) -> (Vec<T>, FairPairsTrace) {
    let mut out = results.to_vec();
    if results.len() < 2 {
        return (
            out,
            FairPairsTrace {
                phase: 0,
                pairs: vec![],
                swapped: vec![],
            },
        );
    }
    let phase = usize::from(rng.random::<bool>());
    let mut pairs = Vec::new();
    let mut swapped = Vec::new();
    let mut i = phase;
    while i + 1 < out.len() {
        let swap = rng.random::<bool>();
        if swap {
            out.swap(i, i + 1);
        }
        pairs.push((i, i + 1));
        swapped.push(swap);
        i += 2;
    }
    (
        out,
        FairPairsTrace {
            phase,
            pairs,
            swapped,
        },
    )
}

pub fn fairpairs_shuffle<T: Clone, R: Rng + ?Sized>(results: &[T], rng: &mut R) -> Vec<T> {
    fairpairs_shuffle_traced(results, rng).0
}

/// Simulation details kept out of the session record.
#[derive(Debug, Clone)]
pub struct SessionTrace {
    pub fairpairs: Option<FairPairsTrace>,
    pub examined: Vec<bool>,
}

fn interaction_for_relevant(rng: &mut ChaCha8Rng) -> Interaction {
    match rng.random_range(0..3) {
        0 => Interaction::purchased(),
        1 => Interaction::carted(),
        _ => Interaction::clicked(LONG_DWELL_SECONDS),
    }
}

/// Start and width of the live listing window for session `k`.
fn live_window(n_listings: usize, spec: &WorldSpec) -> impl Fn(usize) -> (usize, usize) {
    let width = spec.live_listings.unwrap_or(n_listings).min(n_listings);
    let span = (n_listings - width) as f64;
    let last = spec.n_sessions_per_query.saturating_sub(1).max(1) as f64;
    move |k| (((k as f64 / last) * span).round() as usize, width)
}

/// Sessions with their simulation traces, grouped by query in world order.
pub fn generate_sessions_traced(world: &World, spec: &WorldSpec) -> Result<Vec<(Session, SessionTrace)>> {
    spec.validate()?;
    let page = spec.page_size();
    let mut out = Vec::with_capacity(world.pools.len() * spec.n_sessions_per_query);
    for (qi, pool) in world.pools.iter().enumerate() {
        if pool.listings.len() < page {
            return Err(Error::InvalidConfig(format!(
                "query `{}` has fewer listings than the page size",
                pool.query
            )));
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("sessions/{}", pool.query)));
        let live = live_window(pool.listings.len(), spec);
        for k in 0..spec.n_sessions_per_query {
            let (start, width) = live(k);
            let shown: Vec<&String> = index::sample(&mut rng, width, page)
                .into_iter()
                .map(|i| &pool.listings[start + i])
                .collect();
            let (order, fp) = if spec.fairpairs {
                let (order, trace) = fairpairs_shuffle_traced(&shown, &mut rng);
                (order, Some(trace))
            } else {
                (shown, None)
            };

            let mut examined = vec![false; page];
            match &fp {
                Some(trace) => {
                    let mut paired = vec![false; page];
                    for &(a, b) in &trace.pairs {
                        let seen = rng.random::<f64>() < spec.position_bias[a];
                        examined[a] = seen;
                        examined[b] = seen;
                        paired[a] = true;
                        paired[b] = true;
                    }
                    for pos in 0..page {
                        if !paired[pos] {
                            examined[pos] = rng.random::<f64>() < spec.position_bias[pos];
                        }
                    }
                }
                None => {
                    for (pos, e) in examined.iter_mut().enumerate() {
                        *e = rng.random::<f64>() < spec.position_bias[pos];
                    }
                }
            }

            let presented = order
                .iter()
                .zip(&examined)
                .map(|(id, &seen)| {
                    let relevant = world.truth.relevance(&pool.query, id) == Some(1);
                    let interaction = if seen && relevant {
                        interaction_for_relevant(&mut rng)
                    } else {
                        Interaction::ignored()
                    };
                    PresentedResult {
                        listing_id: (*id).clone(),
                        interaction,
                    }
                })
                .collect();
            let session = Session {
                query: pool.query.clone(),
                presented,
                timestamp: BASE_TIMESTAMP + (k * 60 + qi) as i64,
                fairpairs_flag: spec.fairpairs,
            };
            out.push((
                session,
                SessionTrace {
                    fairpairs: fp,
                    examined,
                },
            ));
        }
    }
    Ok(out)
}

pub fn generate_sessions(world: &World, spec: &WorldSpec) -> Result<Vec<Session>> {
    Ok(generate_sessions_traced(world, spec)?
        .into_iter()
        .map(|(s, _)| s)
        .collect())
}

#[derive(Debug, Clone, Default)]
pub struct SessionSplit {
    pub train: Vec<Session>,
    pub validation: Vec<Session>,
    pub test: Vec<Session>,
}

/// Splits each query's sessions in time order: the first `train_fraction`
/// train, the next `validation_fraction` validate, the rest test.
pub fn split_sessions(sessions: Vec<Session>, train_fraction: f64, validation_fraction: f64) -> SessionSplit {
    let mut by_query: BTreeMap<String, Vec<Session>> = BTreeMap::new();
    for s in sessions {
        by_query.entry(s.query.clone()).or_default().push(s);
    }
    let mut split = SessionSplit::default();
    for (_, mut group) in by_query {
        group.sort_by_key(|s| s.timestamp);
        let n = group.len();
        let n_train = (train_fraction * n as f64).round() as usize;
        let n_valid = ((validation_fraction * n as f64).round() as usize).min(n - n_train);
        let mut rest = group.split_off(n_train);
        let test = rest.split_off(n_valid);
        split.train.extend(group);
        split.validation.extend(rest);
        split.test.extend(test);
    }
    split
}

/// Paths of a world written to disk.
#[derive(Debug, Clone)]
pub struct WorldFiles {
    pub catalog: PathBuf,
    pub embeddings: PathBuf,
    pub train_sessions: PathBuf,
    pub validation_sessions: PathBuf,
    pub test_sessions: PathBuf,
    pub truth: PathBuf,
}

/// Generates a world and its logs and writes them in the standard file formats.
pub fn write_world(spec: &WorldSpec, dir: impl AsRef<Path>, binary_embeddings: bool) -> Result<WorldFiles> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let world = generate_world(spec)?;
    let sessions = generate_sessions(&world, spec)?;
    let split = split_sessions(sessions, spec.train_fraction, spec.validation_fraction);

    let files = WorldFiles {
        catalog: dir.join("catalog.tsv"),
        embeddings: dir.join(if binary_embeddings {
            "embeddings.mmeb"
        } else {
            "embeddings.txt"
        }),
        train_sessions: dir.join("sessions_train.jsonl"),
        validation_sessions: dir.join("sessions_valid.jsonl"),
        test_sessions: dir.join("sessions_test.jsonl"),
        truth: dir.join("truth.json"),
    };
    write_catalog(&world.catalog, &files.catalog)?;
    if binary_embeddings {
        world.store.write_binary(&files.embeddings)?;
    } else {
        world.store.write_text(&files.embeddings)?;
    }
    write_sessions(&split.train, &files.train_sessions)?;
    write_sessions(&split.validation, &files.validation_sessions)?;
    write_sessions(&split.test, &files.test_sessions)?;
    std::fs::write(&files.truth, serde_json::to_string_pretty(&world.truth)?)?;
    Ok(files)
}
