//! Implicit preference mining and the pairwise transform.
//!
//! A listing the user interacted with is preferred over each immediately
//! adjacent listing they ignored. Each preference becomes one classification
//! instance whose orientation is decided by a seeded coin flip, which keeps
//! the per-query label distribution balanced.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Session;
use crate::embedding::{Embedder, Layout, Modality, MultimodalVector, SparseVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub query: String,
    pub preferred: String,
    pub ignored: String,
    pub session_ts: i64,
}

/// Difference of two embedded listings; same block layout as the inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffVector {
    pub sparse: SparseVector,
    pub dense: Vec<f64>,
}

impl DiffVector {
    pub fn layout(&self) -> Layout {
        Layout {
            sparse_dim: self.sparse.dim(),
            dense_dim: self.dense.len(),
        }
    }

    pub fn negated(&self) -> DiffVector {
        DiffVector {
            sparse: self.sparse.negated(),
            dense: self.dense.iter().map(|v| -v).collect(),
        }
    }

    pub fn dense_norm(&self) -> f64 {
        self.dense.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "1")]
    WellOrdered,
    #[serde(rename = "-1")]
    Reversed,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::WellOrdered => 1.0,
            Label::Reversed => -1.0,
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::WellOrdered => Label::Reversed,
            Label::Reversed => Label::WellOrdered,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseInstance {
    pub query: String,
    pub x: DiffVector,
    pub y: Label,
}

/// Mines `(q, d+, d-)` triples: each relevant listing against each adjacent
/// (position ±1) listing with relevance 0.
pub fn mine_preference_pairs(sessions: &[Session], dwell_threshold: f64) -> Vec<PreferencePair> {
    let mut pairs = Vec::new();
    for session in sessions {
        let rel = session.relevances(dwell_threshold);
        for (pos, r) in rel.iter().enumerate() {
            if *r <= 0.0 {
                continue;
            }
            let neighbours = [pos.checked_sub(1), Some(pos + 1)];
            for nb in neighbours.into_iter().flatten() {
                if nb < rel.len() && rel[nb] == 0.0 {
                    pairs.push(PreferencePair {
                        query: session.query.clone(),
                        preferred: session.presented[pos].listing_id.clone(),
                        ignored: session.presented[nb].listing_id.clone(),
                        session_ts: session.timestamp,
                    });
                }
            }
        }
    }
    pairs
}

/// Groups pairs by query, preserving mining order within each query.
pub fn pairs_by_query(pairs: Vec<PreferencePair>) -> BTreeMap<String, Vec<PreferencePair>> {
    let mut out: BTreeMap<String, Vec<PreferencePair>> = BTreeMap::new();
    for p in pairs {
        out.entry(p.query.clone()).or_default().push(p);
    }
    out
}

/// `a - b` over both blocks. Exact zeros are elided from the sparse block.
pub fn sparse_dense_diff(a: &MultimodalVector, b: &MultimodalVector) -> Result<DiffVector> {
    if a.modality != b.modality {
        return Err(Error::LayoutMismatch(format!(
            "cannot subtract {} vector from {} vector",
            b.modality, a.modality
        )));
    }
    if a.layout() != b.layout() {
        return Err(Error::LayoutMismatch(format!(
            "layouts differ: {:?} vs {:?}",
            a.layout(),
            b.layout()
        )));
    }
    Ok(DiffVector {
        sparse: a.text.sub(&b.text),
        dense: a.dense().iter().zip(b.dense()).map(|(x, y)| x - y).collect(),
    })
}

/// Maps an embedded preference to an instance: `(d+ - d-, +1)` for a
/// well-ordered label, `(d- - d+, -1)` otherwise.
pub fn pairwise_transform(
    query: &str,
    preferred: &MultimodalVector,
    ignored: &MultimodalVector,
    label: Label,
) -> Result<PairwiseInstance> {
    let x = match label {
        Label::WellOrdered => sparse_dense_diff(preferred, ignored)?,
        Label::Reversed => sparse_dense_diff(ignored, preferred)?,
    };
    Ok(PairwiseInstance {
        query: query.to_string(),
        x,
        y: label,
    })
}

/// The coin flip: `r > 0.5` is well ordered, anything else (including exactly 0.5) reversed.
pub fn label_for_draw(r: f64) -> Label {
    if r > 0.5 {
        Label::WellOrdered
    } else {
        Label::Reversed
    }
}

/// Stable per-key seed, so streams do not depend on scheduling order.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut buf = [0u8; 8];
    buf.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(buf)
}

#[derive(Debug, Clone, Default)]
pub struct InstanceSet {
    pub instances: Vec<PairwiseInstance>,
    /// Pairs dropped because one endpoint could not be embedded.
    pub dropped: usize,
}

/// Embeds each pair and flips a coin drawn from `draw`. One instance per pair.
pub fn make_instances_with(
    pairs: &[PreferencePair],
    embedder: &Embedder<'_>,
    modality: Modality,
    mut draw: impl FnMut(&PreferencePair) -> f64,
) -> InstanceSet {
    let mut set = InstanceSet::default();
    for pair in pairs {
        let embedded = embedder
            .embed(&pair.preferred, modality)
            .and_then(|p| embedder.embed(&pair.ignored, modality).map(|n| (p, n)));
        let (plus, minus) = match embedded {
            Ok(v) => v,
            Err(e) => {
                log::debug!("dropping pair {} > {}: {e}", pair.preferred, pair.ignored);
                set.dropped += 1;
                continue;
            }
        };
        let label = label_for_draw(draw(pair));
        let inst = pairwise_transform(&pair.query, &plus, &minus, label)
            .expect("vectors embedded in one modality share a layout");
        set.instances.push(inst);
    }
    if set.dropped > 0 {
        log::warn!("{} of {} pairs dropped for {modality} modality", set.dropped, pairs.len());
    }
    set
}

/// Seeded instance generation; each query draws from its own stream seeded
/// with `derive_seed(rng_seed, query)`.
pub fn make_instances(
    pairs: &[PreferencePair],
    embedder: &Embedder<'_>,
    modality: Modality,
    rng_seed: u64,
) -> InstanceSet {
    let mut streams: BTreeMap<String, ChaCha8Rng> = BTreeMap::new();
    make_instances_with(pairs, embedder, modality, |pair| {
        streams
            .entry(pair.query.clone())
            .or_insert_with(|| ChaCha8Rng::seed_from_u64(derive_seed(rng_seed, &pair.query)))
            .random::<f64>()
    })
}

#[derive(Serialize)]
struct InstanceRecord<'a> {
    query: &'a str,
    y: i8,
    sparse: Vec<(usize, f64)>,
    dense: &'a [f64],
}

/// Debug dump: one JSON object per instance.
pub fn write_instances(instances: &[PairwiseInstance], mut out: impl Write) -> Result<()> {
    for inst in instances {
        let rec = InstanceRecord {
            query: &inst.query,
            y: inst.y.sign() as i8,
            sparse: inst.x.sparse.entries().to_vec(),
            dense: &inst.x.dense,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Catalog, Interaction, Listing, PresentedResult};
    use crate::embedding::{build_vocabulary, DenseVector, EmbeddingStore};

    fn session(entries: &[(&str, Interaction)]) -> Session {
        Session {
            query: "desk".into(),
            presented: entries
                .iter()
                .map(|(id, i)| PresentedResult {
                    listing_id: id.to_string(),
                    interaction: *i,
                })
                .collect(),
            timestamp: 100,
            fairpairs_flag: true,
        }
    }

    #[test]
    fn purchase_between_two_ignored() {
        let s = session(&[
            ("L1", Interaction::ignored()),
            ("L2", Interaction::purchased()),
            ("L3", Interaction::ignored()),
        ]);
        let pairs = mine_preference_pairs(&[s], 30.0);
        let got: Vec<(&str, &str)> = pairs
            .iter()
            .map(|p| (p.preferred.as_str(), p.ignored.as_str()))
            .collect();
        assert_eq!(got, vec![("L2", "L1"), ("L2", "L3")]);
        assert!(pairs.iter().all(|p| p.query == "desk" && p.session_ts == 100));
    }

    #[test]
    fn no_relevant_or_no_negative_yields_nothing() {
        let all_ignored = session(&[("L1", Interaction::ignored()), ("L2", Interaction::ignored())]);
        let all_bought = session(&[("L1", Interaction::purchased()), ("L2", Interaction::purchased())]);
        assert!(mine_preference_pairs(&[all_ignored, all_bought], 30.0).is_empty());
    }

    #[test]
    fn short_click_is_an_eligible_negative() {
        let s = session(&[("L1", Interaction::carted()), ("L2", Interaction::clicked(3.0))]);
        let pairs = mine_preference_pairs(&[s], 30.0);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].ignored, "L2");
    }

    #[test]
    fn non_adjacent_ignored_listing_not_paired() {
        let s = session(&[
            ("L1", Interaction::purchased()),
            ("L2", Interaction::purchased()),
            ("L3", Interaction::ignored()),
        ]);
        let pairs = mine_preference_pairs(&[s], 30.0);
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].preferred.as_str(), pairs[0].ignored.as_str()), ("L2", "L3"));
    }

    fn fixture() -> (Catalog, EmbeddingStore) {
        let mk = |id: &str, title: &str| Listing {
            listing_id: id.into(),
            shop_id: "S".into(),
            title: title.into(),
            tags: vec![],
            image_ref: Some(format!("img-{id}")),
        };
        let catalog = Catalog::from_listings([mk("A", "red desk"), mk("B", "blue desk"), mk("C", "lamp")]).unwrap();
        let mut store = EmbeddingStore::new(2);
        store.insert("img-A", DenseVector::new(vec![1.0, 0.0])).unwrap();
        store.insert("img-B", DenseVector::new(vec![0.0, 2.0])).unwrap();
        (catalog, store)
    }

    fn pair(p: &str, n: &str) -> PreferencePair {
        PreferencePair {
            query: "desk".into(),
            preferred: p.into(),
            ignored: n.into(),
            session_ts: 0,
        }
    }

    #[test]
    fn forced_draws_pick_orientation() {
        let (catalog, store) = fixture();
        let vocab = build_vocabulary(&catalog, 1).unwrap();
        let emb = Embedder::new(&catalog, &vocab, Some(&store));
        let plus = emb.embed("A", Modality::Multimodal).unwrap();
        let minus = emb.embed("B", Modality::Multimodal).unwrap();
        let forward = sparse_dense_diff(&plus, &minus).unwrap();

        let hi = make_instances_with(&[pair("A", "B")], &emb, Modality::Multimodal, |_| 0.9);
        assert_eq!(hi.instances[0].y, Label::WellOrdered);
        assert_eq!(hi.instances[0].x, forward);
        assert_eq!(hi.instances[0].x.dense, vec![1.0, -1.0]);

        let lo = make_instances_with(&[pair("A", "B")], &emb, Modality::Multimodal, |_| 0.1);
        assert_eq!(lo.instances[0].y, Label::Reversed);
        assert_eq!(lo.instances[0].x, forward.negated());

        assert_eq!(label_for_draw(0.5), Label::Reversed);
    }

    #[test]
    fn identical_endpoints_give_zero_vector() {
        let (catalog, store) = fixture();
        let vocab = build_vocabulary(&catalog, 1).unwrap();
        let emb = Embedder::new(&catalog, &vocab, Some(&store));
        let set = make_instances(&[pair("A", "A")], &emb, Modality::Multimodal, 3);
        assert_eq!(set.instances.len(), 1);
        assert!(set.instances[0].x.sparse.is_empty());
        assert!(set.instances[0].x.dense.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_image_drops_pair_only_for_image_modalities() {
        let (catalog, store) = fixture();
        let vocab = build_vocabulary(&catalog, 1).unwrap();
        let emb = Embedder::new(&catalog, &vocab, Some(&store));
        let pairs = [pair("A", "C"), pair("A", "B")];
        let text = make_instances(&pairs, &emb, Modality::Text, 1);
        assert_eq!((text.instances.len(), text.dropped), (2, 0));
        let mm = make_instances(&pairs, &emb, Modality::Multimodal, 1);
        assert_eq!((mm.instances.len(), mm.dropped), (1, 1));
        let img = make_instances(&pairs, &emb, Modality::Image, 1);
        assert_eq!((img.instances.len(), img.dropped), (1, 1));
    }

    #[test]
    fn diff_examples() {
        let a = MultimodalVector {
            modality: Modality::Multimodal,
            text: SparseVector::from_entries(10, vec![(7, 1.0)]).unwrap(),
            image: Some(DenseVector::new(vec![1.0, 0.0])),
        };
        let b = MultimodalVector {
            modality: Modality::Multimodal,
            text: SparseVector::from_entries(10, vec![(7, 1.0), (9, 1.0)]).unwrap(),
            image: Some(DenseVector::new(vec![0.0, 1.0])),
        };
        let d = sparse_dense_diff(&a, &b).unwrap();
        assert_eq!(d.sparse.entries(), &[(9, -1.0)]);
        assert_eq!(d.dense, vec![1.0, -1.0]);

        let same = sparse_dense_diff(&a, &a).unwrap();
        assert!(same.sparse.is_empty());
        assert_eq!(same.dense, vec![0.0, 0.0]);

        let text_only = MultimodalVector {
            modality: Modality::Text,
            text: a.text.clone(),
            image: None,
        };
        assert!(matches!(sparse_dense_diff(&a, &text_only), Err(Error::LayoutMismatch(_))));
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let (catalog, store) = fixture();
        let vocab = build_vocabulary(&catalog, 1).unwrap();
        let emb = Embedder::new(&catalog, &vocab, Some(&store));
        let pairs: Vec<_> = (0..50).map(|_| pair("A", "B")).collect();
        let a = make_instances(&pairs, &emb, Modality::Multimodal, 11);
        let b = make_instances(&pairs, &emb, Modality::Multimodal, 11);
        assert_eq!(a.instances, b.instances);
        let c = make_instances(&pairs, &emb, Modality::Multimodal, 12);
        assert_ne!(
            a.instances.iter().map(|i| i.y).collect::<Vec<_>>(),
            c.instances.iter().map(|i| i.y).collect::<Vec<_>>()
        );
    }

    #[test]
    fn dump_format() {
        let inst = PairwiseInstance {
            query: "q".into(),
            x: DiffVector {
                sparse: SparseVector::from_entries(5, vec![(2, -1.0)]).unwrap(),
                dense: vec![0.5],
            },
            y: Label::Reversed,
        };
        let mut buf = Vec::new();
        write_instances(&[inst], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"query\":\"q\",\"y\":-1,\"sparse\":[[2,-1.0]],\"dense\":[0.5]}\n"
        );
    }
}
