//! Downstream retrieval tasks: candidate pools, cosine ranking, the metric
//! suite and task reports.

mod metrics;
pub mod oracle;
mod pool;
mod rank;
mod report;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::model::{ItemText, ModelError};
use crate::session::{SessionGraph, TaskDataset, Variant};

pub use metrics::{
    apq_at_n, hit_by_query, map_at_n, mapq_at_n, mrrq_at_n, recall_at_n, RankedResult,
};
pub use pool::{
    attribute_id, relevant_ids, Candidate, CandidateItem, CandidatePool, DISTRACTORS_PER_QUERY,
};
pub use rank::{cosine, normalize_rows, order_by_score, rank_scores};
pub use report::{compute_metrics, render_table, MetricRecord, TaskReport, METRIC_NAMES};

/// Cutoffs reported for every metric.
pub const DEFAULT_CUTOFFS: [usize; 3] = [1, 32, 64];

/// Sessions or candidates embedded per forward pass.
pub const EMBED_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    ProductSearch,
    QuerySearch,
    EntityLinking,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::ProductSearch, Task::QuerySearch, Task::EntityLinking];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::ProductSearch => "product_search",
            Task::QuerySearch => "query_search",
            Task::EntityLinking => "entity_linking",
        }
    }

    /// Dataset variant whose sessions hide the task's target.
    pub fn variant(self) -> Variant {
        match self {
            Task::QuerySearch => Variant::WithoutLastQuery,
            Task::ProductSearch | Task::EntityLinking => Variant::WithoutPurchase,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s || t.as_str().replace('_', "-") == s)
            .ok_or_else(|| EvalError::UnknownTask(s.to_string()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("unknown task `{0}` (expected product_search, query_search or entity_linking)")]
    UnknownTask(String),
    #[error("empty candidate pool for {0}")]
    EmptyPool(Task),
    #[error("dataset is {found} but {task} needs {expected}")]
    WrongVariant {
        task: Task,
        expected: Variant,
        found: Variant,
    },
    #[error("embedding returned {got} vectors for {expected} inputs")]
    EmbeddingCount { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Maps sessions and candidates into a shared embedding space.
pub trait Embedder: Sync {
    fn embed_sessions(&self, sessions: &[&SessionGraph]) -> Result<Vec<Vec<f64>>, ModelError>;
    fn embed_candidates(&self, items: &[ItemText<'_>]) -> Result<Vec<Vec<f64>>, ModelError>;
}

fn checked(expected: usize, rows: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>, EvalError> {
    if rows.len() != expected {
        return Err(EvalError::EmbeddingCount {
            expected,
            got: rows.len(),
        });
    }
    Ok(rows)
}

/// Unit-norm embeddings of every pool candidate, in pool order.
pub fn embed_pool(pool: &CandidatePool, embedder: &dyn Embedder) -> Result<Vec<Vec<f64>>, EvalError> {
    let chunks: Vec<Vec<Vec<f64>>> = pool
        .items()
        .par_chunks(EMBED_CHUNK)
        .map(|chunk| {
            let texts: Vec<ItemText<'_>> = chunk.iter().map(Candidate::text).collect();
            checked(chunk.len(), embedder.embed_candidates(&texts)?)
        })
        .collect::<Result<_, _>>()?;
    let mut rows: Vec<Vec<f64>> = chunks.into_iter().flatten().collect();
    normalize_rows(&mut rows);
    Ok(rows)
}

/// Cosine score of every candidate for every session of `data`.
pub fn score_dataset(
    pool: &CandidatePool,
    data: &TaskDataset,
    embedder: &dyn Embedder,
) -> Result<Vec<Vec<f64>>, EvalError> {
    let cands = embed_pool(pool, embedder)?;
    let chunks: Vec<Vec<Vec<f64>>> = data
        .examples
        .par_chunks(EMBED_CHUNK)
        .map(|chunk| {
            let sessions: Vec<&SessionGraph> = chunk.iter().map(|e| &e.session).collect();
            let mut emb = checked(chunk.len(), embedder.embed_sessions(&sessions)?)?;
            normalize_rows(&mut emb);
            Ok(emb
                .iter()
                .map(|s| cands.iter().map(|c| s.iter().zip(c).map(|(a, b)| a * b).sum()).collect())
                .collect())
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Ranks every example given its score row. Examples whose label has no
/// candidate in the pool are skipped; the count is returned alongside.
pub fn rank_dataset(
    pool: &CandidatePool,
    data: &TaskDataset,
    scores: &[Vec<f64>],
    n: usize,
) -> (Vec<RankedResult>, usize) {
    let mut results = Vec::with_capacity(data.len());
    let mut skipped = 0;
    for (e, s) in data.examples.iter().zip(scores) {
        let relevant = pool.relevant(&e.label);
        if relevant.is_empty() {
            log::warn!("session `{}` has no label in the pool; skipped", e.session.session_id);
            skipped += 1;
            continue;
        }
        results.push(rank_scores(
            &e.session.session_id,
            &e.label.last_query.key(),
            pool,
            s,
            &relevant,
            n,
        ));
    }
    (results, skipped)
}

/// Builds the pool over `data`, ranks every session and computes all
/// metrics at `cutoffs`.
pub fn run_task(
    task: Task,
    data: &TaskDataset,
    embedder: &dyn Embedder,
    cutoffs: &[usize],
) -> Result<TaskReport, EvalError> {
    if data.variant != task.variant() {
        return Err(EvalError::WrongVariant {
            task,
            expected: task.variant(),
            found: data.variant,
        });
    }
    let pool = CandidatePool::build(task, data)?;
    let scores = score_dataset(&pool, data, embedder)?;
    let n = cutoffs.iter().copied().max().unwrap_or(1);
    let (results, skipped) = rank_dataset(&pool, data, &scores, n);
    Ok(TaskReport {
        task,
        sessions: results.len(),
        skipped,
        pool_size: pool.len(),
        records: compute_metrics(task, &results, cutoffs),
        results,
    })
}

#[cfg(test)]
mod tests;
