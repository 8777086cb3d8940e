//! Ranking quality: DCG/NDCG per session, macro-averaged to query and modality
//! figures, relative lift over a baseline and the Wilcoxon signed-rank test.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::corpus::Session;
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::ranksvm::{rank, QueryModel};

/// Largest sample size for which the exact null distribution is used.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

/// `sum_{i<=p} (2^rel_i - 1) / log2(i + 1)`.
pub fn dcg(rel: &[f64], cutoff: usize) -> Result<f64> {
    if cutoff == 0 || cutoff > rel.len() {
        return Err(Error::InvalidCutoff {
            cutoff,
            len: rel.len(),
        });
    }
    Ok(rel[..cutoff]
        .iter()
        .enumerate()
        .map(|(i, &r)| (2f64.powf(r) - 1.0) / ((i + 2) as f64).log2())
        .sum())
}

/// DCG divided by the DCG of the relevance-sorted list.
pub fn ndcg(rel: &[f64], cutoff: usize) -> Result<f64> {
    let actual = dcg(rel, cutoff)?;
    let mut ideal_order = rel.to_vec();
    ideal_order.sort_by(|a, b| b.total_cmp(a));
    let ideal = dcg(&ideal_order, cutoff)?;
    if ideal <= 0.0 {
        return Err(Error::ZeroIdcg);
    }
    Ok(actual / ideal)
}

/// Re-ranks a labeled session with the model and returns NDCG over the full page.
pub fn session_ndcg(
    model: &QueryModel,
    session: &Session,
    embedder: &Embedder<'_>,
    dwell_threshold: f64,
) -> Result<f64> {
    let labels: BTreeMap<&str, f64> = session
        .presented
        .iter()
        .map(|r| {
            (
                r.listing_id.as_str(),
                crate::corpus::relevance_of(r.interaction, dwell_threshold),
            )
        })
        .collect();
    if !labels.values().any(|&r| r > 0.0) {
        return Err(Error::ZeroIdcg);
    }
    let docs = session
        .presented
        .iter()
        .map(|r| Ok((r.listing_id.as_str(), embedder.embed(&r.listing_id, model.modality)?)))
        .collect::<Result<Vec<_>>>()?;
    let ranked = rank(model, &docs)?;
    let rel: Vec<f64> = ranked.iter().map(|(id, _)| labels[id.as_str()]).collect();
    ndcg(&rel, rel.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub mean_ndcg: f64,
    pub sessions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub per_query: BTreeMap<String, QueryScore>,
    /// Unweighted mean over query means.
    pub mean: f64,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Macro-average: sessions within each query, then queries.
pub fn aggregate(per_session: &BTreeMap<String, Vec<f64>>) -> Result<Aggregate> {
    if per_session.is_empty() {
        return Err(Error::Empty("no queries to aggregate"));
    }
    let mut per_query = BTreeMap::new();
    for (query, scores) in per_session {
        if scores.is_empty() {
            return Err(Error::Empty("query without evaluated sessions"));
        }
        per_query.insert(
            query.clone(),
            QueryScore {
                mean_ndcg: mean(scores),
                sessions: scores.len(),
            },
        );
    }
    let query_means: Vec<f64> = per_query.values().map(|s| s.mean_ndcg).collect();
    Ok(Aggregate {
        mean: mean(&query_means),
        per_query,
    })
}

/// `100 * (candidate - baseline) / baseline`.
pub fn relative_lift(candidate_mean: f64, baseline_mean: f64) -> Result<f64> {
    if baseline_mean <= 0.0 {
        return Err(Error::ZeroBaseline);
    }
    Ok(100.0 * (candidate_mean - baseline_mean) / baseline_mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub method: WilcoxonMethod,
}

/// Midranks of `values` (1-based), ties sharing their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test on paired samples `(a, b)`.
///
/// Zero differences are dropped and tied magnitudes get midranks. For
/// `n <= 25` the p-value is exact: the null distribution of `W+` is counted
/// over all `2^n` sign assignments of the (mid)ranks. Larger samples use the
/// normal approximation with tie and continuity corrections.
pub fn wilcoxon_signed_rank(paired: &[(f64, f64)]) -> Result<WilcoxonResult> {
    let diffs: Vec<f64> = paired
        .iter()
        .map(|(a, b)| b - a)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::AllZeroDifferences);
    }
    let n = diffs.len();
    if n < 6 {
        log::warn!("Wilcoxon test on only {n} non-zero differences; p-value is coarse");
    }
    let magnitudes: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&magnitudes);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);

    let (p_value, method) = if n <= WILCOXON_EXACT_MAX_N {
        (exact_two_sided(&ranks, statistic), WilcoxonMethod::Exact)
    } else {
        (normal_two_sided(&magnitudes, n, statistic), WilcoxonMethod::Normal)
    };
    Ok(WilcoxonResult {
        statistic,
        w_plus,
        w_minus,
        p_value,
        n,
        method,
    })
}

fn exact_two_sided(ranks: &[f64], statistic: f64) -> f64 {
    // Midranks are multiples of 1/2, so doubled ranks are integers.
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let threshold = (statistic * 2.0).round() as usize;
    let lower: u64 = counts[..=threshold.min(total)].iter().sum();
    let p = 2.0 * lower as f64 / 2f64.powi(ranks.len() as i32);
    p.min(1.0)
}

fn normal_two_sided(magnitudes: &[f64], n: usize, statistic: f64) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut sorted = magnitudes.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((statistic - mean + 0.5) / var.sqrt()).min(0.0);
    let normal = Normal::standard();
    (2.0 * normal.cdf(z)).min(1.0)
}

/// Modality comparison summary. Columns are `text`, `image`, `multimodal`
/// and `selected` (the per-query chosen modality).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub columns: Vec<String>,
    /// Test-set query means per column.
    pub per_query: BTreeMap<String, BTreeMap<String, QueryScore>>,
    pub validation_per_query: BTreeMap<String, BTreeMap<String, QueryScore>>,
    pub modality_means: BTreeMap<String, f64>,
    pub validation_means: BTreeMap<String, f64>,
    /// Percent change versus the text column.
    pub lifts: BTreeMap<String, f64>,
    pub significance: BTreeMap<String, WilcoxonResult>,
    pub significance_level: f64,
    /// Share of evaluated queries whose validation NDCG improved with the
    /// multimodal representation over text.
    pub multimodal_preference_fraction: Option<f64>,
    pub selected_counts: BTreeMap<String, usize>,
    pub skipped_queries: BTreeMap<String, String>,
    /// Test and validation sessions skipped per column (no relevant item or not embeddable).
    pub skipped_sessions: BTreeMap<String, usize>,
    pub notes: Vec<String>,
}

fn column_label(column: &str) -> &str {
    match column {
        "text" => "Text",
        "image" => "Image",
        "multimodal" => "MM",
        "selected" => "Selected",
        other => other,
    }
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Human-readable table: one column per modality, lift row with markers.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["Modality".to_string()];
        header.extend(self.columns.iter().map(|c| column_label(c).to_string()));
        rows.push(header);

        let mut means = vec!["Average NDCG".to_string()];
        let mut lifts = vec!["Relative lift in NDCG".to_string()];
        let mut pvals = vec!["Wilcoxon p (two-sided)".to_string()];
        for c in &self.columns {
            means.push(
                self.modality_means
                    .get(c)
                    .map_or("-".into(), |m| format!("{m:.4}")),
            );
            let marker = match self.significance.get(c) {
                Some(w) if w.p_value < self.significance_level => "*",
                _ => "",
            };
            lifts.push(
                self.lifts
                    .get(c)
                    .map_or("-".into(), |l| format!("{l:+.1}%{marker}")),
            );
            pvals.push(
                self.significance
                    .get(c)
                    .map_or("-".into(), |w| format!("{:.3e}", w.p_value)),
            );
        }
        rows.extend([means, lifts, pvals]);

        let widths: Vec<usize> = (0..rows[0].len())
            .map(|col| rows.iter().map(|r| r[col].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell:<w$}"))
                .collect();
            let _ = writeln!(out, "| {} |", cells.join(" | "));
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
            }
        }
        let _ = writeln!(
            out,
            "\n* change over the text baseline is significant at level {} (Wilcoxon signed-rank, two-sided, zero differences dropped)",
            self.significance_level
        );
        let evaluated = self
            .per_query
            .values()
            .flat_map(|qs| qs.keys())
            .collect::<std::collections::BTreeSet<_>>()
            .len();
        let _ = writeln!(
            out,
            "queries evaluated: {evaluated}, skipped: {}",
            self.skipped_queries.len()
        );
        if let Some(f) = self.multimodal_preference_fraction {
            let _ = writeln!(
                out,
                "queries with higher validation NDCG under multimodal than text: {:.1}%",
                100.0 * f
            );
        }
        for note in &self.notes {
            let _ = writeln!(out, "note: {note}");
        }
        out
    }
}
