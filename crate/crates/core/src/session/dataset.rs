//! Leakage-safe finetuning datasets.
//!
//! Labels are extracted from the full session first, then the purchase (and,
//! for the query task, the last query) is scrubbed. Splits are made so that no
//! last query of a test session occurs as the last query of a train or
//! validation session.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Attribute, Edge, Product, Query, SessionGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    WithoutPurchase,
    WithoutLastQuery,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::WithoutPurchase => "without_purchase",
            Variant::WithoutLastQuery => "without_last_query",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "without_purchase" => Ok(Variant::WithoutPurchase),
            "without_last_query" => Ok(Variant::WithoutLastQuery),
            other => Err(format!("unknown dataset variant `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Targets of the three downstream tasks, taken from the unscrubbed session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Label {
    pub product: Product,
    /// The query under which the purchase happened.
    pub last_query: Query,
    /// Purchased product's attributes, excluding the product sequence.
    pub attributes: Vec<Attribute>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskExample {
    pub session: SessionGraph,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDataset {
    pub variant: Variant,
    pub split: Split,
    pub examples: Vec<TaskExample>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn last_query_keys(&self) -> HashSet<String> {
        self.examples.iter().map(|e| e.label.last_query.key()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSplits {
    pub train: TaskDataset,
    pub val: TaskDataset,
    pub test: TaskDataset,
    /// Sessions dropped because scrubbing left them without queries.
    pub dropped: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DatasetError {
    #[error("session `{0}` has no purchase")]
    MissingPurchase(String),
    #[error("session `{session}` purchases unknown product `{product}`")]
    UnknownPurchasedProduct { session: String, product: String },
    #[error("split ratios must be non-negative with a positive sum")]
    BadRatios,
}

/// Removes the purchased product, every edge touching it, and the purchase.
/// Queries are never removed.
pub fn without_purchase(s: &SessionGraph) -> SessionGraph {
    let mut out = s.clone();
    if let Some(p) = out.purchase.take() {
        out.products.retain(|x| x.product_id != p.product);
        out.edges.retain(|e| match e {
            Edge::QueryProduct { product, .. } => *product != p.product,
            Edge::QueryQuery { .. } => true,
        });
    }
    out
}

/// Scrubs the purchase, then the purchase query and every earlier query with
/// the same text. Products left without edges are dropped. Returns `None` when
/// no query survives.
pub fn without_last_query(s: &SessionGraph) -> Option<SessionGraph> {
    let last_index = s.purchase.as_ref()?.query;
    let last_tokens = s.queries.get(last_index)?.tokens.clone();
    let mut out = without_purchase(s);

    let removed: HashSet<usize> = out
        .queries
        .iter()
        .filter(|q| q.index == last_index || (q.index < last_index && q.tokens == last_tokens))
        .map(|q| q.index)
        .collect();
    let mut remap = HashMap::new();
    let mut kept = Vec::new();
    for q in out.queries.drain(..) {
        if !removed.contains(&q.index) {
            remap.insert(q.index, kept.len());
            kept.push(Query::new(kept.len(), q.tokens));
        }
    }
    if kept.is_empty() {
        return None;
    }
    out.queries = kept;
    out.edges = out
        .edges
        .into_iter()
        .filter_map(|e| match e {
            Edge::QueryProduct {
                query,
                product,
                action,
            } => remap.get(&query).map(|&q| Edge::QueryProduct {
                query: q,
                product,
                action,
            }),
            Edge::QueryQuery { src, dst, .. } => match (remap.get(&src), remap.get(&dst)) {
                (Some(&a), Some(&b)) => Some(Edge::QueryQuery {
                    src: a,
                    dst: b,
                    distance: b - a,
                }),
                _ => None,
            },
        })
        .collect();
    let linked: HashSet<String> = out
        .query_product_edges()
        .map(|(_, p, _)| p.to_string())
        .collect();
    out.products.retain(|p| linked.contains(&p.product_id));
    Some(out)
}

fn extract_label(s: &SessionGraph) -> Result<Label, DatasetError> {
    let purchase = s
        .purchase
        .as_ref()
        .ok_or_else(|| DatasetError::MissingPurchase(s.session_id.clone()))?;
    let product = s
        .product(&purchase.product)
        .ok_or_else(|| DatasetError::UnknownPurchasedProduct {
            session: s.session_id.clone(),
            product: purchase.product.clone(),
        })?
        .clone();
    let last_query = s
        .queries
        .get(purchase.query)
        .ok_or_else(|| DatasetError::MissingPurchase(s.session_id.clone()))?
        .clone();
    let attributes = product.side_attributes().cloned().collect();
    Ok(Label {
        product,
        last_query,
        attributes,
    })
}

/// Builds train/val/test splits for one dataset variant.
///
/// Sessions are grouped by last-query text; whole groups are assigned to the
/// test split first (in seeded random order) until it holds its share, the
/// remaining sessions are shuffled into train and validation.
pub fn build_task_dataset(
    sessions: &[SessionGraph],
    variant: Variant,
    ratios: SplitRatios,
    seed: u64,
) -> Result<TaskSplits, DatasetError> {
    let SplitRatios { train, val, test } = ratios;
    let total_ratio = train + val + test;
    if train < 0.0 || val < 0.0 || test < 0.0 || total_ratio <= 0.0 {
        return Err(DatasetError::BadRatios);
    }

    let mut examples = Vec::with_capacity(sessions.len());
    let mut dropped = Vec::new();
    for s in sessions {
        let label = extract_label(s)?;
        let scrubbed = match variant {
            Variant::Full => Some(s.clone()),
            Variant::WithoutPurchase => Some(without_purchase(s)),
            Variant::WithoutLastQuery => without_last_query(s),
        };
        match scrubbed {
            Some(mut session) => {
                session.canonicalize();
                examples.push(TaskExample { session, label });
            }
            None => dropped.push(s.session_id.clone()),
        }
    }

    let mut groups: BTreeMap<String, Vec<TaskExample>> = BTreeMap::new();
    for e in examples {
        groups.entry(e.label.last_query.key()).or_default().push(e);
    }
    let total: usize = groups.values().map(Vec::len).sum();
    let mut keys: Vec<String> = groups.keys().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    keys.shuffle(&mut rng);

    let test_target = (test / total_ratio * total as f64).round() as usize;
    let mut test_set = Vec::new();
    let mut rest = Vec::new();
    for key in keys {
        let group = groups.remove(&key).unwrap_or_default();
        if test_set.len() < test_target {
            test_set.extend(group);
        } else {
            rest.extend(group);
        }
    }
    rest.shuffle(&mut rng);
    let train_share = if train + val > 0.0 {
        train / (train + val)
    } else {
        0.0
    };
    let n_train = (train_share * rest.len() as f64).round() as usize;
    let val_set = rest.split_off(n_train.min(rest.len()));

    let make = |split, examples| TaskDataset {
        variant,
        split,
        examples,
    };
    Ok(TaskSplits {
        train: make(Split::Train, rest),
        val: make(Split::Val, val_set),
        test: make(Split::Test, test_set),
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::graph::{Action, Purchase};
    use crate::session::validate::validate_session;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn product(id: &str) -> Product {
        Product::new(
            id,
            vec![
                Attribute::product_sequence(toks(id), vec![]),
                Attribute::new("color", toks("red")),
            ],
        )
    }

    /// q0 views p1 and p2 (the later purchase), q1 repeats q0's text, q2 buys p2.
    fn viewed_then_bought() -> SessionGraph {
        let mut s = SessionGraph::new("s");
        s.queries.push(Query::new(0, toks("mug")));
        s.queries.push(Query::new(1, toks("red mug")));
        s.queries.push(Query::new(2, toks("mug")));
        s.products = vec![product("p1"), product("p2")];
        s.edges.push(Edge::query_product(0, "p1", Action::View));
        s.edges.push(Edge::query_product(0, "p2", Action::View));
        s.edges.push(Edge::query_product(2, "p2", Action::Purchase));
        s.purchase = Some(Purchase {
            query: 2,
            product: "p2".into(),
        });
        s
    }

    #[test]
    fn purchased_product_removed_everywhere() {
        let s = without_purchase(&viewed_then_bought());
        assert!(s.product("p2").is_none());
        assert!(s.query_product_edges().all(|(_, p, _)| p != "p2"));
        assert_eq!(s.queries.len(), 3);
        assert!(s.purchase.is_none());
        assert!(validate_session(&s).is_empty());
    }

    #[test]
    fn last_query_and_its_earlier_occurrences_removed() {
        let s = without_last_query(&viewed_then_bought()).unwrap();
        assert_eq!(s.queries, vec![Query::new(0, toks("red mug"))]);
        // p1 was only linked to the removed q0.
        assert!(s.products.is_empty());
        assert!(validate_session(&s).iter().all(|v| v.code() != "orphan_product"));
    }

    #[test]
    fn single_query_session_dropped() {
        let mut s = SessionGraph::new("one");
        s.queries.push(Query::new(0, toks("mug")));
        s.products.push(product("p"));
        s.edges.push(Edge::query_product(0, "p", Action::Purchase));
        s.purchase = Some(Purchase {
            query: 0,
            product: "p".into(),
        });
        assert!(without_last_query(&s).is_none());
        let splits =
            build_task_dataset(&[s], Variant::WithoutLastQuery, SplitRatios::default(), 1)
                .unwrap();
        assert_eq!(splits.dropped, vec!["one".to_string()]);
    }

    #[test]
    fn label_taken_before_scrubbing() {
        let splits = build_task_dataset(
            &[viewed_then_bought()],
            Variant::WithoutLastQuery,
            SplitRatios::default(),
            3,
        )
        .unwrap();
        let all: Vec<_> = [&splits.train, &splits.val, &splits.test]
            .iter()
            .flat_map(|d| d.examples.iter())
            .collect();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].label.product.product_id, "p2");
        assert_eq!(all[0].label.last_query.tokens, toks("mug"));
        assert_eq!(all[0].label.attributes, vec![Attribute::new("color", toks("red"))]);
    }

    #[test]
    fn missing_purchase_rejected_with_id() {
        let mut s = viewed_then_bought();
        s.session_id = "nopurchase".into();
        s.purchase = None;
        let err = build_task_dataset(&[s], Variant::Full, SplitRatios::default(), 0).unwrap_err();
        assert_eq!(err, DatasetError::MissingPurchase("nopurchase".into()));
    }
}
