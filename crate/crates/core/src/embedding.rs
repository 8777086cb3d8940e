//! Listing representations: binary bag-of-words over terms and ids, L2-normalized
//! image activations, and their concatenation.
//!
//! The text block has `|T| = |D| + |L| + |S|` columns laid out as contiguous
//! blocks: terms first, then listing ids, then shop ids. The image block is a
//! dense vector of the embedding store's dimension.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, Listing};
use crate::error::{Error, Result};

const BINARY_MAGIC: &[u8; 4] = b"MMEB";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Multimodal,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Image, Modality::Multimodal];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Multimodal => "multimodal",
        }
    }

    pub fn uses_text(self) -> bool {
        matches!(self, Modality::Text | Modality::Multimodal)
    }

    pub fn uses_image(self) -> bool {
        matches!(self, Modality::Image | Modality::Multimodal)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            "multimodal" | "mm" => Ok(Modality::Multimodal),
            other => Err(Error::InvalidConfig(format!("unknown modality `{other}`"))),
        }
    }
}

/// Splits on non-alphanumeric runs after lowercasing.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Unigrams and bigrams of a single field. Bigrams never cross field boundaries.
pub fn field_terms(field: &str) -> Vec<String> {
    let tokens = tokenize(field);
    let mut terms = tokens.clone();
    terms.extend(tokens.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    terms
}

/// Distinct terms over the listing's title and each of its tags.
pub fn listing_terms(listing: &Listing) -> BTreeSet<String> {
    listing.text_fields().flat_map(field_terms).collect()
}

/// Column assignment for the sparse text block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    term_index: BTreeMap<String, usize>,
    listing_index: BTreeMap<String, usize>,
    shop_index: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    terms: Vec<String>,
    listings: Vec<String>,
    shops: Vec<String>,
}

impl Vocabulary {
    /// Assigns contiguous blocks in lexicographic order within each block.
    pub fn from_parts(
        terms: impl IntoIterator<Item = String>,
        listings: impl IntoIterator<Item = String>,
        shops: impl IntoIterator<Item = String>,
    ) -> Self {
        let terms: BTreeSet<String> = terms.into_iter().collect();
        let listings: BTreeSet<String> = listings.into_iter().collect();
        let shops: BTreeSet<String> = shops.into_iter().collect();
        let n_terms = terms.len();
        let n_listings = listings.len();
        Vocabulary {
            term_index: terms.into_iter().enumerate().map(|(i, t)| (t, i)).collect(),
            listing_index: listings
                .into_iter()
                .enumerate()
                .map(|(i, l)| (l, n_terms + i))
                .collect(),
            shop_index: shops
                .into_iter()
                .enumerate()
                .map(|(i, s)| (s, n_terms + n_listings + i))
                .collect(),
        }
    }

    pub fn n_terms(&self) -> usize {
        self.term_index.len()
    }

    pub fn n_listings(&self) -> usize {
        self.listing_index.len()
    }

    pub fn n_shops(&self) -> usize {
        self.shop_index.len()
    }

    /// `|T| = |D| + |L| + |S|`.
    pub fn total_dim(&self) -> usize {
        self.n_terms() + self.n_listings() + self.n_shops()
    }

    pub fn term(&self, term: &str) -> Option<usize> {
        self.term_index.get(term).copied()
    }

    pub fn listing(&self, listing_id: &str) -> Option<usize> {
        self.listing_index.get(listing_id).copied()
    }

    pub fn shop(&self, shop_id: &str) -> Option<usize> {
        self.shop_index.get(shop_id).copied()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&str, usize)> {
        self.term_index.iter().map(|(t, &i)| (t.as_str(), i))
    }

    /// Human-readable name of a sparse column, for inspecting model weights.
    pub fn column_name(&self, index: usize) -> Option<String> {
        let find = |m: &BTreeMap<String, usize>| {
            m.iter().find(|(_, &i)| i == index).map(|(k, _)| k.clone())
        };
        if index < self.n_terms() {
            find(&self.term_index).map(|t| format!("term:{t}"))
        } else if index < self.n_terms() + self.n_listings() {
            find(&self.listing_index).map(|l| format!("listing:{l}"))
        } else {
            find(&self.shop_index).map(|s| format!("shop:{s}"))
        }
    }

    pub fn to_json(&self) -> String {
        let file = VocabularyFile {
            terms: self.term_index.keys().cloned().collect(),
            listings: self.listing_index.keys().cloned().collect(),
            shops: self.shop_index.keys().cloned().collect(),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabularyFile = serde_json::from_str(text)?;
        Ok(Vocabulary::from_parts(file.terms, file.listings, file.shops))
    }
}

/// Collects unigram and bigram terms present in at least `min_term_count`
/// listings, plus every listing and shop id.
pub fn build_vocabulary(catalog: &Catalog, min_term_count: usize) -> Result<Vocabulary> {
    if catalog.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    let mut doc_freq: BTreeMap<String, usize> = BTreeMap::new();
    for listing in catalog.iter() {
        for term in listing_terms(listing) {
            *doc_freq.entry(term).or_default() += 1;
        }
    }
    let terms = doc_freq
        .into_iter()
        .filter(|&(_, n)| n >= min_term_count)
        .map(|(t, _)| t);
    Ok(Vocabulary::from_parts(
        terms,
        catalog.iter().map(|l| l.listing_id.clone()),
        catalog.iter().map(|l| l.shop_id.clone()),
    ))
}

/// Sorted sparse vector; indices strictly increasing, values non-zero.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseVector {
    dim: usize,
    entries: Vec<(usize, f64)>,
}

impl SparseVector {
    pub fn empty(dim: usize) -> Self {
        SparseVector {
            dim,
            entries: Vec::new(),
        }
    }

    /// Sorts entries and drops exact zeros. Duplicate or out-of-range indices are rejected.
    pub fn from_entries(dim: usize, mut entries: Vec<(usize, f64)>) -> Result<Self> {
        entries.retain(|&(_, v)| v != 0.0);
        entries.sort_by_key(|&(i, _)| i);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::LayoutMismatch(format!("duplicate sparse index {}", w[0].0)));
            }
        }
        if let Some(&(i, _)) = entries.last() {
            if i >= dim {
                return Err(Error::LayoutMismatch(format!(
                    "sparse index {i} out of range for dimension {dim}"
                )));
            }
        }
        Ok(SparseVector { dim, entries })
    }

    pub(crate) fn from_sorted_unchecked(dim: usize, entries: Vec<(usize, f64)>) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].0 < w[1].0));
        debug_assert!(entries.iter().all(|&(i, v)| i < dim && v != 0.0));
        SparseVector { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .map(|pos| self.entries[pos].1)
            .unwrap_or(0.0)
    }

    /// Merge-based dot product with another sparse vector.
    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut a, mut b) = (self.entries.iter().peekable(), other.entries.iter().peekable());
        let mut acc = 0.0;
        while let (Some(&&(i, x)), Some(&&(j, y))) = (a.peek(), b.peek()) {
            match i.cmp(&j) {
                std::cmp::Ordering::Less => {
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    b.next();
                }
                std::cmp::Ordering::Equal => {
                    acc += x * y;
                    a.next();
                    b.next();
                }
            }
        }
        acc
    }

    pub fn l1_norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v.abs()).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum()
    }

    pub fn negated(&self) -> SparseVector {
        SparseVector {
            dim: self.dim,
            entries: self.entries.iter().map(|&(i, v)| (i, -v)).collect(),
        }
    }

    /// `self - other`, eliding exact zeros.
    pub fn sub(&self, other: &SparseVector) -> SparseVector {
        let mut out = Vec::with_capacity(self.nnz() + other.nnz());
        let (mut a, mut b) = (self.entries.iter().peekable(), other.entries.iter().peekable());
        loop {
            let next = match (a.peek(), b.peek()) {
                (Some(&&(i, x)), Some(&&(j, y))) => match i.cmp(&j) {
                    std::cmp::Ordering::Less => {
                        a.next();
                        (i, x)
                    }
                    std::cmp::Ordering::Greater => {
                        b.next();
                        (j, -y)
                    }
                    std::cmp::Ordering::Equal => {
                        a.next();
                        b.next();
                        (i, x - y)
                    }
                },
                (Some(&&(i, x)), None) => {
                    a.next();
                    (i, x)
                }
                (None, Some(&&(j, y))) => {
                    b.next();
                    (j, -y)
                }
                (None, None) => break,
            };
            if next.1 != 0.0 {
                out.push(next);
            }
        }
        SparseVector {
            dim: self.dim.max(other.dim),
            entries: out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Self {
        DenseVector(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Divides by the Euclidean norm. An all-zero vector signals a corrupt embedding.
pub fn normalize_l2(v: &DenseVector) -> Result<DenseVector> {
    if v.0.iter().any(|x| !x.is_finite()) {
        return Err(Error::LayoutMismatch("non-finite dense value".into()));
    }
    let norm = v.norm();
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(DenseVector(v.0.iter().map(|x| x / norm).collect()))
}

/// Block dimensions of a modality's feature space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub sparse_dim: usize,
    pub dense_dim: usize,
}

impl Layout {
    pub fn for_modality(modality: Modality, vocab: &Vocabulary, image_dim: usize) -> Self {
        Layout {
            sparse_dim: if modality.uses_text() { vocab.total_dim() } else { 0 },
            dense_dim: if modality.uses_image() { image_dim } else { 0 },
        }
    }

    /// `|M| = |T| + |I|` for the multimodal layout.
    pub fn logical_dim(&self) -> usize {
        self.sparse_dim + self.dense_dim
    }
}

/// Sparse text block followed by a dense image block.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalVector {
    pub modality: Modality,
    pub text: SparseVector,
    pub image: Option<DenseVector>,
}

impl MultimodalVector {
    pub fn layout(&self) -> Layout {
        Layout {
            sparse_dim: self.text.dim(),
            dense_dim: self.image.as_ref().map_or(0, DenseVector::len),
        }
    }

    pub fn logical_dim(&self) -> usize {
        self.layout().logical_dim()
    }

    pub fn dense(&self) -> &[f64] {
        self.image.as_ref().map_or(&[], |d| d.values())
    }
}

/// Raw (un-normalized) image activations keyed by image reference.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingStore {
    dim: usize,
    vectors: BTreeMap<String, DenseVector>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        EmbeddingStore {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, key: impl Into<String>, vector: DenseVector) -> Result<()> {
        let key = key.into();
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                key,
                expected: self.dim,
                found: vector.len(),
            });
        }
        self.vectors.insert(key, vector);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&DenseVector> {
        self.vectors.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseVector)> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn write_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "dim={}", self.dim)?;
        for (key, v) in &self.vectors {
            write!(out, "{key}")?;
            for x in v.values() {
                write!(out, " {x}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Binary layout: `MMEB`, u32 dim, then per record a u32 key length, the
    /// UTF-8 key and `dim` f32 values, all little-endian.
    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        out.write_all(BINARY_MAGIC)?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        for (key, v) in &self.vectors {
            out.write_all(&(key.len() as u32).to_le_bytes())?;
            out.write_all(key.as_bytes())?;
            for &x in v.values() {
                out.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn embed_parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_text_store(text: &str, path: &Path) -> Result<EmbeddingStore> {
    let mut lines = text.lines().enumerate();
    let dim = match lines.next() {
        Some((_, header)) => header
            .trim()
            .strip_prefix("dim=")
            .and_then(|d| d.parse::<usize>().ok())
            .ok_or_else(|| embed_parse_err(path, 1, "expected header `dim=<N>`"))?,
        None => return Err(embed_parse_err(path, 1, "missing `dim=<N>` header")),
    };
    let mut store = EmbeddingStore::new(dim);
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().expect("non-empty line has a token");
        let values = parts
            .map(|tok| {
                tok.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| embed_parse_err(path, idx + 1, format!("bad float `{tok}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        store.insert(key, DenseVector(values))?;
    }
    Ok(store)
}

fn parse_binary_store(bytes: &[u8], path: &Path) -> Result<EmbeddingStore> {
    let truncated = |what: &str| embed_parse_err(path, 0, format!("truncated binary embedding file ({what})"));
    let mut cursor = &bytes[BINARY_MAGIC.len()..];
    let read_u32 = |cur: &mut &[u8], what: &str| -> Result<u32> {
        let mut buf = [0u8; 4];
        cur.read_exact(&mut buf).map_err(|_| truncated(what))?;
        Ok(u32::from_le_bytes(buf))
    };
    let dim = read_u32(&mut cursor, "dim")? as usize;
    let mut store = EmbeddingStore::new(dim);
    while !cursor.is_empty() {
        let key_len = read_u32(&mut cursor, "key length")? as usize;
        if cursor.len() < key_len {
            return Err(truncated("key"));
        }
        let key = std::str::from_utf8(&cursor[..key_len])
            .map_err(|_| embed_parse_err(path, 0, "key is not UTF-8"))?
            .to_string();
        cursor = &cursor[key_len..];
        if cursor.len() < dim * 4 {
            return Err(truncated("values"));
        }
        let values: Vec<f64> = cursor[..dim * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        cursor = &cursor[dim * 4..];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(embed_parse_err(path, 0, format!("non-finite value for `{key}`")));
        }
        store.insert(key, DenseVector(values))?;
    }
    Ok(store)
}

/// Loads either the text or the binary embedding format, detected by magic bytes.
pub fn load_embedding_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.starts_with(BINARY_MAGIC) {
        parse_binary_store(&bytes, path)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| embed_parse_err(path, 0, "file is neither MMEB binary nor UTF-8 text"))?;
        parse_text_store(text, path)
    }
}

/// Binary bag of words: term columns present in title/tags, plus the listing
/// and shop id columns. Unknown terms and ids are skipped.
pub fn embed_text(listing: &Listing, vocab: &Vocabulary) -> SparseVector {
    let mut indices: BTreeSet<usize> = listing_terms(listing)
        .iter()
        .filter_map(|t| vocab.term(t))
        .collect();
    match vocab.listing(&listing.listing_id) {
        Some(i) => {
            indices.insert(i);
        }
        None => warn!("listing `{}` not in vocabulary; id feature skipped", listing.listing_id),
    }
    match vocab.shop(&listing.shop_id) {
        Some(i) => {
            indices.insert(i);
        }
        None => warn!("shop `{}` not in vocabulary; id feature skipped", listing.shop_id),
    }
    SparseVector::from_sorted_unchecked(
        vocab.total_dim(),
        indices.into_iter().map(|i| (i, 1.0)).collect(),
    )
}

fn image_block(listing: &Listing, store: Option<&EmbeddingStore>) -> Result<DenseVector> {
    let store = store.ok_or_else(|| {
        Error::InvalidConfig("image features requested without an embedding store".into())
    })?;
    let key = listing
        .image_ref
        .as_deref()
        .ok_or_else(|| Error::NoImageRef(listing.listing_id.clone()))?;
    let raw = store
        .get(key)
        .ok_or_else(|| Error::MissingEmbedding(key.to_string()))?;
    normalize_l2(raw)
}

/// Embeds a listing in the requested modality's space.
pub fn embed_multimodal(
    listing: &Listing,
    vocab: &Vocabulary,
    store: Option<&EmbeddingStore>,
    modality: Modality,
) -> Result<MultimodalVector> {
    let text = if modality.uses_text() {
        embed_text(listing, vocab)
    } else {
        SparseVector::empty(0)
    };
    let image = if modality.uses_image() {
        Some(image_block(listing, store)?)
    } else {
        None
    };
    Ok(MultimodalVector {
        modality,
        text,
        image,
    })
}

/// Catalog, vocabulary and optional image store bundled for id-based embedding.
#[derive(Debug, Clone, Copy)]
pub struct Embedder<'a> {
    pub catalog: &'a Catalog,
    pub vocab: &'a Vocabulary,
    pub store: Option<&'a EmbeddingStore>,
}

impl<'a> Embedder<'a> {
    pub fn new(catalog: &'a Catalog, vocab: &'a Vocabulary, store: Option<&'a EmbeddingStore>) -> Self {
        Embedder {
            catalog,
            vocab,
            store,
        }
    }

    pub fn layout(&self, modality: Modality) -> Layout {
        Layout::for_modality(modality, self.vocab, self.store.map_or(0, EmbeddingStore::dim))
    }

    pub fn embed(&self, listing_id: &str, modality: Modality) -> Result<MultimodalVector> {
        let listing = self
            .catalog
            .get(listing_id)
            .ok_or_else(|| Error::UnknownListing(listing_id.to_string()))?;
        embed_multimodal(listing, self.vocab, self.store, modality)
    }
}
