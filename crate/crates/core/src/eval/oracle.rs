//! Naive per-definition reference implementations of the ranking metrics.
//!
//! Each oracle expands a session's rank into its 0/1 relevance list over the
//! top `n` positions and evaluates the textbook definition over that list.
//! They share no code with [`super::metrics`] and exist to cross-check it.

use super::metrics::RankedResult;

fn relevance(r: &RankedResult, n: usize) -> Vec<u8> {
    (1..=n).map(|k| u8::from(r.rank == Some(k))).collect()
}

fn precision_at(rel: &[u8], k: usize) -> f64 {
    rel[..k].iter().map(|&x| x as f64).sum::<f64>() / k as f64
}

/// Per-session AP = sum_k P@k * rel(k) / (number of relevant retrieved),
/// averaged over sessions.
pub fn map(results: &[RankedResult], n: usize) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for r in results {
        let rel = relevance(r, n);
        let hits: u32 = rel.iter().map(|&x| x as u32).sum();
        let mut ap = 0.0;
        for k in 1..=n {
            ap += precision_at(&rel, k) * rel[k - 1] as f64;
        }
        if hits > 0 {
            total += ap / hits as f64;
        }
    }
    total / results.len() as f64
}

pub fn recall(results: &[RankedResult], n: usize) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let found = results
        .iter()
        .filter(|r| relevance(r, n).contains(&1))
        .count();
    found as f64 / results.len() as f64
}

fn grouped(results: &[RankedResult]) -> Vec<(String, Vec<&RankedResult>)> {
    let mut out: Vec<(String, Vec<&RankedResult>)> = Vec::new();
    for r in results {
        match out.iter_mut().find(|(k, _)| *k == r.query_key) {
            Some((_, v)) => v.push(r),
            None => out.push((r.query_key.clone(), vec![r])),
        }
    }
    out
}

/// Per query group, `(1 / sum rel) * sum_{k=1..n} min(1, sum_{s: r_s <= k} rel_s(k) / k)`.
pub fn mapq(results: &[RankedResult], n: usize) -> f64 {
    let groups = grouped(results);
    if groups.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (_, sessions) in &groups {
        let rels: Vec<Vec<u8>> = sessions.iter().map(|r| relevance(r, n)).collect();
        let sum_rel: f64 = rels.iter().flatten().map(|&x| x as f64).sum();
        if sum_rel == 0.0 {
            continue;
        }
        let mut apq = 0.0;
        for k in 1..=n {
            let mut num = 0.0;
            for (s, rel) in sessions.iter().zip(&rels) {
                if s.rank.is_some_and(|r| r <= k) {
                    num += rel[k - 1] as f64;
                }
            }
            apq += f64::min(1.0, num / k as f64);
        }
        total += apq / sum_rel;
    }
    total / groups.len() as f64
}

/// Per query group, the best reciprocal rank of a first relevant position.
pub fn mrrq(results: &[RankedResult], n: usize) -> f64 {
    let groups = grouped(results);
    if groups.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (_, sessions) in &groups {
        let mut best = 0.0f64;
        for s in sessions {
            if let Some(p) = relevance(s, n).iter().position(|&x| x == 1) {
                best = best.max(1.0 / (p + 1) as f64);
            }
        }
        total += best;
    }
    total / groups.len() as f64
}

pub fn hit_by_query(results: &[RankedResult], n: usize) -> f64 {
    let groups = grouped(results);
    if groups.is_empty() {
        return 0.0;
    }
    let hits = groups
        .iter()
        .filter(|(_, s)| s.iter().any(|r| relevance(r, n).contains(&1)))
        .count();
    hits as f64 / groups.len() as f64
}

/// Largest disagreement between each metric and its oracle over `cases`.
pub fn max_disagreement(cases: &[(Vec<RankedResult>, usize)]) -> f64 {
    use super::metrics as m;
    let pairs: [(fn(&[RankedResult], usize) -> f64, fn(&[RankedResult], usize) -> f64); 5] = [
        (m::map_at_n, map),
        (m::recall_at_n, recall),
        (m::mapq_at_n, mapq),
        (m::mrrq_at_n, mrrq),
        (m::hit_by_query, hit_by_query),
    ];
    let mut worst = 0.0f64;
    for (results, n) in cases {
        for (fast, slow) in pairs {
            worst = worst.max((fast(results, *n) - slow(results, *n)).abs());
        }
    }
    worst
}

/// Random result sets: up to 40 sessions over up to 6 query keys, ranks up
/// to 80 or missing, cutoffs up to 70.
pub fn random_cases<R: rand::Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<(Vec<RankedResult>, usize)> {
    (0..count)
        .map(|_| {
            let sessions = rng.random_range(1..=40);
            let keys = rng.random_range(1..=6);
            let results = (0..sessions)
                .map(|i| {
                    let key = format!("q{}", rng.random_range(0..keys));
                    let rank = if rng.random_bool(0.2) {
                        None
                    } else {
                        Some(rng.random_range(1..=80))
                    };
                    RankedResult::with_rank(format!("s{i}"), key, rank)
                })
                .collect();
            (results, rng.random_range(1..=70))
        })
        .collect()
}
