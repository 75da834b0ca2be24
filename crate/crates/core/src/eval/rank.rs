//! Cosine ranking of candidate pools.

use std::cmp::Ordering;

use super::metrics::RankedResult;
use super::pool::CandidatePool;

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Scales rows to unit norm in place; zero rows stay zero.
pub fn normalize_rows(rows: &mut [Vec<f64>]) {
    for r in rows {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            r.iter_mut().for_each(|x| *x /= n);
        }
    }
}

/// Pool indices ordered by descending score, ties by ascending candidate id.
/// The pool is id-sorted, so ties resolve to ascending index.
pub fn order_by_score(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    idx
}

/// Ranks one session given a score per pool candidate, keeping the top `n`.
/// `rank` is the 1-based position of the best-placed relevant candidate, or
/// `None` when it falls outside the top `n`.
pub fn rank_scores(
    session_id: &str,
    query_key: &str,
    pool: &CandidatePool,
    scores: &[f64],
    relevant: &[usize],
    n: usize,
) -> RankedResult {
    assert_eq!(scores.len(), pool.len(), "one score per candidate");
    let order = order_by_score(scores);
    let rank = order
        .iter()
        .take(n)
        .position(|i| relevant.contains(i))
        .map(|p| p + 1);
    RankedResult {
        session_id: session_id.to_string(),
        query_key: query_key.to_string(),
        ranking: order.iter().take(n).map(|&i| pool.get(i).id.clone()).collect(),
        relevant: relevant.iter().map(|&i| pool.get(i).id.clone()).collect(),
        rank,
    }
}
