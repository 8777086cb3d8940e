//! Multimodal pairwise learning to rank.
//!
//! Listings are embedded as a binary bag of words over title/tag terms and
//! listing/shop ids, an L2-normalized image activation vector, or the
//! concatenation of both. Preference pairs mined from search sessions train
//! one linear RankingSVM per query; models are compared by macro-averaged
//! NDCG on held-out sessions.

pub mod corpus;
pub mod embedding;
pub mod error;
pub mod metrics;
pub mod pairgen;
pub mod ranksvm;
pub mod pipeline;
pub mod synthlog;

pub use error::{Error, Result};
