//! Listings, search sessions and implicit relevance.
//!
//! Catalogs are tab-separated text with a header line; sessions are JSON lines.
//! Both are immutable once loaded.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default dwell threshold, in seconds, above which a click counts as relevant.
pub const DEFAULT_DWELL_THRESHOLD: f64 = 30.0;

const CATALOG_HEADER: &str = "listing_id\tshop_id\ttitle\ttags\timage_ref";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Listing {
    pub listing_id: String,
    pub shop_id: String,
    pub title: String,
    pub tags: Vec<String>,
    pub image_ref: Option<String>,
}

impl Listing {
    /// Title and tags, the fields term extraction reads from.
    pub fn text_fields(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.title.as_str()).chain(self.tags.iter().map(String::as_str))
    }

    /// True when title and every tag are blank after whitespace normalization.
    pub fn has_empty_text(&self) -> bool {
        self.text_fields().all(|f| f.trim().is_empty())
    }
}

/// A document collection keyed by listing id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Catalog {
    pub listings: BTreeMap<String, Listing>,
    pub source_meta: Vec<String>,
}

impl Catalog {
    /// Builds a catalog, rejecting duplicate ids.
    pub fn from_listings(listings: impl IntoIterator<Item = Listing>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for listing in listings {
            let id = listing.listing_id.clone();
            if map.insert(id.clone(), listing).is_some() {
                return Err(Error::DuplicateListing(id));
            }
        }
        Ok(Catalog {
            listings: map,
            source_meta: Vec::new(),
        })
    }

    pub fn get(&self, listing_id: &str) -> Option<&Listing> {
        self.listings.get(listing_id)
    }

    pub fn len(&self) -> usize {
        self.listings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.listings.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Listing> {
        self.listings.values()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionKind {
    Ignored,
    Clicked,
    Carted,
    Purchased,
}

impl InteractionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InteractionKind::Ignored => "ignored",
            InteractionKind::Clicked => "clicked",
            InteractionKind::Carted => "carted",
            InteractionKind::Purchased => "purchased",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ignored" => Some(InteractionKind::Ignored),
            "clicked" => Some(InteractionKind::Clicked),
            "carted" => Some(InteractionKind::Carted),
            "purchased" => Some(InteractionKind::Purchased),
            _ => None,
        }
    }
}

impl fmt::Display for InteractionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub kind: InteractionKind,
    /// Seconds spent on the listing page; only meaningful for clicks.
    pub dwell_seconds: f64,
}

impl Interaction {
    pub fn ignored() -> Self {
        Interaction {
            kind: InteractionKind::Ignored,
            dwell_seconds: 0.0,
        }
    }

    pub fn clicked(dwell_seconds: f64) -> Self {
        Interaction {
            kind: InteractionKind::Clicked,
            dwell_seconds,
        }
    }

    pub fn carted() -> Self {
        Interaction {
            kind: InteractionKind::Carted,
            dwell_seconds: 0.0,
        }
    }

    pub fn purchased() -> Self {
        Interaction {
            kind: InteractionKind::Purchased,
            dwell_seconds: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresentedResult {
    pub listing_id: String,
    pub interaction: Interaction,
}

/// One result page shown for a query, position 1 first.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub query: String,
    pub presented: Vec<PresentedResult>,
    pub timestamp: i64,
    pub fairpairs_flag: bool,
}

impl Session {
    /// Binary relevance labels in presented order.
    pub fn relevances(&self, dwell_threshold: f64) -> Vec<f64> {
        self.presented
            .iter()
            .map(|r| relevance_of(r.interaction, dwell_threshold))
            .collect()
    }

    pub fn has_relevant(&self, dwell_threshold: f64) -> bool {
        self.presented
            .iter()
            .any(|r| relevance_of(r.interaction, dwell_threshold) > 0.0)
    }
}

/// Lowercases and collapses runs of whitespace.
pub fn normalize_query(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Binary implicit relevance: purchases, carts and long-dwell clicks count.
/// The dwell comparison is strict.
pub fn relevance_of(interaction: Interaction, dwell_threshold: f64) -> f64 {
    match interaction.kind {
        InteractionKind::Purchased | InteractionKind::Carted => 1.0,
        InteractionKind::Clicked if interaction.dwell_seconds > dwell_threshold => 1.0,
        InteractionKind::Clicked | InteractionKind::Ignored => 0.0,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<Catalog> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines().enumerate();

    match lines.next() {
        None => {
            warn!("catalog {} is empty", path.display());
            return Ok(Catalog {
                listings: BTreeMap::new(),
                source_meta: vec![format!("loaded from {}", path.display())],
            });
        }
        Some((_, header)) => {
            let header = header?;
            if header.trim_end_matches('\r') != CATALOG_HEADER {
                return Err(parse_err(path, 1, format!("expected header `{CATALOG_HEADER}`")));
            }
        }
    }

    let mut listings = BTreeMap::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 5 tab-separated fields, found {}", fields.len()),
            ));
        }
        if fields[0].is_empty() {
            return Err(parse_err(path, lineno, "empty listing_id"));
        }
        let tags = if fields[3].is_empty() {
            Vec::new()
        } else {
            fields[3].split(',').map(str::to_string).collect()
        };
        let listing = Listing {
            listing_id: fields[0].to_string(),
            shop_id: fields[1].to_string(),
            title: fields[2].to_string(),
            tags,
            image_ref: (!fields[4].is_empty()).then(|| fields[4].to_string()),
        };
        if listings.insert(listing.listing_id.clone(), listing).is_some() {
            return Err(Error::DuplicateListing(fields[0].to_string()));
        }
    }
    if listings.is_empty() {
        warn!("catalog {} has no listings", path.display());
    }
    Ok(Catalog {
        listings,
        source_meta: vec![format!("loaded from {}", path.display())],
    })
}

fn check_field(listing: &Listing, field: &'static str, value: &str, allow_comma: bool) -> Result<()> {
    if value.contains(['\t', '\n', '\r']) {
        return Err(Error::InvalidField {
            listing: listing.listing_id.clone(),
            field,
            reason: "contains a tab or line break",
        });
    }
    if !allow_comma && value.contains(',') {
        return Err(Error::InvalidField {
            listing: listing.listing_id.clone(),
            field,
            reason: "tags cannot contain commas",
        });
    }
    Ok(())
}

pub fn write_catalog(catalog: &Catalog, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{CATALOG_HEADER}")?;
    for l in catalog.iter() {
        check_field(l, "listing_id", &l.listing_id, true)?;
        check_field(l, "shop_id", &l.shop_id, true)?;
        check_field(l, "title", &l.title, true)?;
        for tag in &l.tags {
            check_field(l, "tags", tag, false)?;
        }
        let image_ref = l.image_ref.as_deref().unwrap_or("");
        check_field(l, "image_ref", image_ref, true)?;
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            l.listing_id,
            l.shop_id,
            l.title,
            l.tags.join(","),
            image_ref
        )?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SessionRecord {
    query: String,
    ts: i64,
    fairpairs: bool,
    results: Vec<ResultRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ResultRecord {
    listing: String,
    kind: String,
    dwell: f64,
}

fn session_from_record(rec: SessionRecord, path: &Path, line: usize) -> Result<Session> {
    let mut seen = HashSet::with_capacity(rec.results.len());
    let mut presented = Vec::with_capacity(rec.results.len());
    for r in rec.results {
        let kind = InteractionKind::parse(&r.kind).ok_or_else(|| Error::UnknownInteraction {
            path: path.display().to_string(),
            line,
            kind: r.kind.clone(),
        })?;
        if !r.dwell.is_finite() || r.dwell < 0.0 {
            return Err(parse_err(path, line, format!("invalid dwell {} for `{}`", r.dwell, r.listing)));
        }
        if kind == InteractionKind::Ignored && r.dwell != 0.0 {
            return Err(parse_err(
                path,
                line,
                format!("ignored listing `{}` has non-zero dwell", r.listing),
            ));
        }
        if !seen.insert(r.listing.clone()) {
            return Err(Error::DuplicateInSession {
                path: path.display().to_string(),
                line,
                listing: r.listing,
            });
        }
        presented.push(PresentedResult {
            listing_id: r.listing,
            interaction: Interaction {
                kind,
                dwell_seconds: r.dwell,
            },
        });
    }
    Ok(Session {
        query: normalize_query(&rec.query),
        presented,
        timestamp: rec.ts,
        fairpairs_flag: rec.fairpairs,
    })
}

/// Parses sessions from JSON-lines text. `origin` only labels errors.
pub fn parse_sessions(text: &str, origin: &Path) -> Result<Vec<Session>> {
    let mut sessions = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let rec: SessionRecord =
            serde_json::from_str(line).map_err(|e| parse_err(origin, idx + 1, e.to_string()))?;
        sessions.push(session_from_record(rec, origin, idx + 1)?);
    }
    Ok(sessions)
}

pub fn load_sessions(path: impl AsRef<Path>) -> Result<Vec<Session>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_sessions(&text, path)
}

pub fn session_to_json(session: &Session) -> String {
    let rec = SessionRecord {
        query: session.query.clone(),
        ts: session.timestamp,
        fairpairs: session.fairpairs_flag,
        results: session
            .presented
            .iter()
            .map(|r| ResultRecord {
                listing: r.listing_id.clone(),
                kind: r.interaction.kind.as_str().to_string(),
                dwell: r.interaction.dwell_seconds,
            })
            .collect(),
    };
    serde_json::to_string(&rec).expect("session record serializes")
}

pub fn write_sessions(sessions: &[Session], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for s in sessions {
        writeln!(out, "{}", session_to_json(s))?;
    }
    out.flush()?;
    Ok(())
}

/// Groups sessions by query, keeping file order within each group.
pub fn group_by_query(sessions: &[Session]) -> BTreeMap<String, Vec<&Session>> {
    let mut groups: BTreeMap<String, Vec<&Session>> = BTreeMap::new();
    for s in sessions {
        groups.entry(s.query.clone()).or_default().push(s);
    }
    groups
}
