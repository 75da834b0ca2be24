//! Ranking metrics over per-session results. Every session has at most one
//! relevant rank `r_s`; `None` means the relevant item was not retrieved.

use std::collections::BTreeMap;

/// One ranked session.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub session_id: String,
    /// Last-query text, the grouping key of the by-query metrics.
    pub query_key: String,
    /// Retained top candidates, best first.
    pub ranking: Vec<String>,
    /// Relevant candidate ids; the session is credited at the first one.
    pub relevant: Vec<String>,
    /// 1-based rank of the first relevant candidate, if retained.
    pub rank: Option<usize>,
}

impl RankedResult {
    /// A result with only the rank filled in, for metric-only use.
    pub fn with_rank(session_id: impl Into<String>, query_key: impl Into<String>, rank: Option<usize>) -> Self {
        Self {
            session_id: session_id.into(),
            query_key: query_key.into(),
            ranking: Vec::new(),
            relevant: Vec::new(),
            rank,
        }
    }

    fn within(&self, n: usize) -> Option<usize> {
        self.rank.filter(|&r| r >= 1 && r <= n)
    }
}

fn warn_empty(metric: &str) {
    log::warn!("{metric} over an empty result set is defined as 0");
}

/// Mean over sessions of `1 / r_s`, counting 0 when `r_s > n`.
pub fn map_at_n(results: &[RankedResult], n: usize) -> f64 {
    if results.is_empty() {
        warn_empty("map");
        return 0.0;
    }
    let sum: f64 = results
        .iter()
        .filter_map(|r| r.within(n))
        .fold(0.0, |acc, r| acc + 1.0 / r as f64);
    sum / results.len() as f64
}

/// Fraction of sessions whose relevant item is in the top `n`.
pub fn recall_at_n(results: &[RankedResult], n: usize) -> f64 {
    if results.is_empty() {
        warn_empty("recall");
        return 0.0;
    }
    let hits = results.iter().filter(|r| r.within(n).is_some()).count();
    hits as f64 / results.len() as f64
}

fn groups(results: &[RankedResult]) -> BTreeMap<&str, Vec<Option<usize>>> {
    let mut g: BTreeMap<&str, Vec<Option<usize>>> = BTreeMap::new();
    for r in results {
        g.entry(r.query_key.as_str()).or_default().push(r.rank);
    }
    g
}

/// Average precision of one last-query group:
/// `(1 / R) * sum_{k=1..n} min(1, n_k / k)`, where `n_k` counts sessions
/// with `r_s = k` and `R` counts sessions with `r_s <= n`. `R = 0` gives 0.
pub fn apq_at_n(ranks: &[Option<usize>], n: usize) -> f64 {
    let mut count = vec![0usize; n + 1];
    let mut retrieved = 0;
    for r in ranks.iter().flatten() {
        if (1..=n).contains(r) {
            count[*r] += 1;
            retrieved += 1;
        }
    }
    if retrieved == 0 {
        return 0.0;
    }
    let sum: f64 = (1..=n)
        .filter(|&k| count[k] > 0)
        .fold(0.0, |acc, k| acc + (count[k] as f64 / k as f64).min(1.0));
    sum / retrieved as f64
}

/// Mean of [`apq_at_n`] over last-query groups.
pub fn mapq_at_n(results: &[RankedResult], n: usize) -> f64 {
    let g = groups(results);
    if g.is_empty() {
        warn_empty("mapq");
        return 0.0;
    }
    g.values().fold(0.0, |acc, ranks| acc + apq_at_n(ranks, n)) / g.len() as f64
}

/// Mean over last-query groups of the best reciprocal rank in the group.
pub fn mrrq_at_n(results: &[RankedResult], n: usize) -> f64 {
    let g = groups(results);
    if g.is_empty() {
        warn_empty("mrrq");
        return 0.0;
    }
    let sum: f64 = g
        .values()
        .map(|ranks| {
            ranks
                .iter()
                .flatten()
                .filter(|&&r| (1..=n).contains(&r))
                .map(|&r| 1.0 / r as f64)
                .fold(0.0, f64::max)
        })
        .fold(0.0, |acc, x| acc + x);
    sum / g.len() as f64
}

/// Fraction of last-query groups with at least one session hit in the top `n`.
pub fn hit_by_query(results: &[RankedResult], n: usize) -> f64 {
    let g = groups(results);
    if g.is_empty() {
        warn_empty("hit_by_query");
        return 0.0;
    }
    let hits = g
        .values()
        .filter(|ranks| ranks.iter().flatten().any(|r| (1..=n).contains(r)))
        .count();
    hits as f64 / g.len() as f64
}
