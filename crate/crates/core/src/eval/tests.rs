use std::collections::HashSet;

use super::*;
use crate::session::{build_task_dataset, Attribute, ItemRef, Product, Query, SplitRatios};
use crate::synth::{generate, GenConfig};

fn splits(task: Task) -> crate::session::TaskSplits {
    let cfg = GenConfig {
        num_sessions: 120,
        desk_factor: 0.1,
        seed: 5,
        ..GenConfig::default()
    };
    let sessions = generate(&cfg).unwrap();
    build_task_dataset(&sessions, task.variant(), SplitRatios::default(), 3).unwrap()
}

fn bag(tokens: impl Iterator<Item = String>) -> Vec<f64> {
    let mut v = vec![0.0; 16];
    for t in tokens {
        let h = t.bytes().fold(7u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
        v[(h % 16) as usize] += 1.0;
    }
    v
}

fn text_tokens(t: &ItemText<'_>) -> Vec<String> {
    match t {
        ItemText::Query(q) => q.tokens.clone(),
        ItemText::Product(p) => p.attributes.iter().flat_map(|a| a.tokens.clone()).collect(),
        ItemText::Attribute(a) => a.tokens.clone(),
    }
}

/// Bag-of-hashed-tokens embeddings; sessions sum their items.
struct BagEmbedder;

impl Embedder for BagEmbedder {
    fn embed_sessions(&self, sessions: &[&SessionGraph]) -> Result<Vec<Vec<f64>>, ModelError> {
        Ok(sessions
            .iter()
            .map(|s| {
                let toks = s.item_order().into_iter().flat_map(|i| match i {
                    ItemRef::Query(q) => text_tokens(&ItemText::Query(&s.queries[q])),
                    ItemRef::Product(p) => text_tokens(&ItemText::Product(&s.products[p])),
                });
                bag(toks)
            })
            .collect())
    }

    fn embed_candidates(&self, items: &[ItemText<'_>]) -> Result<Vec<Vec<f64>>, ModelError> {
        Ok(items.iter().map(|t| bag(text_tokens(t).into_iter())).collect())
    }
}

#[test]
fn task_names_round_trip() {
    for t in Task::ALL {
        assert_eq!(t.as_str().parse::<Task>().unwrap(), t);
    }
    assert_eq!("query-search".parse::<Task>().unwrap(), Task::QuerySearch);
    assert!("search".parse::<Task>().is_err());
}

#[test]
fn product_pool_holds_labels_and_distractors() {
    let test = splits(Task::ProductSearch).test;
    let pool = CandidatePool::build(Task::ProductSearch, &test).unwrap();
    let ids: HashSet<&str> = pool.items().iter().map(|c| c.id.as_str()).collect();
    assert_eq!(ids.len(), pool.len());
    for e in &test.examples {
        assert!(ids.contains(e.label.product.product_id.as_str()));
    }
    let purchased: HashSet<&str> = test.examples.iter().map(|e| e.label.product.product_id.as_str()).collect();
    assert!(pool.len() > purchased.len(), "interacted products join the pool");
    assert!(pool.items().windows(2).all(|w| w[0].id < w[1].id));
}

#[test]
fn query_pool_is_all_last_queries() {
    let test = splits(Task::QuerySearch).test;
    let pool = CandidatePool::build(Task::QuerySearch, &test).unwrap();
    let keys: HashSet<String> = test.last_query_keys();
    assert_eq!(pool.len(), keys.len());
    assert!(pool.items().iter().all(|c| keys.contains(&c.id)));
}

#[test]
fn empty_pool_is_an_error() {
    let mut test = splits(Task::QuerySearch).test;
    test.examples.clear();
    assert!(matches!(
        CandidatePool::build(Task::QuerySearch, &test),
        Err(EvalError::EmptyPool(Task::QuerySearch))
    ));
}

#[test]
fn entity_linking_credits_first_correct_attribute() {
    let attrs = [
        Attribute::new("brand", vec!["acme".into()]),
        Attribute::new("color", vec!["red".into()]),
        Attribute::new("color", vec!["blue".into()]),
    ];
    let pool = CandidatePool::from_candidates(Task::EntityLinking, attrs.iter().map(Candidate::attribute)).unwrap();
    let label = crate::session::Label {
        product: Product::new("p", attrs[1..].to_vec()),
        last_query: Query::new(0, vec!["x".into()]),
        attributes: attrs[1..].to_vec(),
    };
    let relevant = pool.relevant(&label);
    assert_eq!(relevant.len(), 2);
    // Pool order: brand=acme, color=blue, color=red.
    let r = rank_scores("s", "x", &pool, &[0.9, 0.1, 0.5], &relevant, 3);
    assert_eq!(r.ranking, vec!["brand=acme", "color=red", "color=blue"]);
    assert_eq!(r.rank, Some(2));
}

#[test]
fn oracle_scores_give_perfect_map() {
    for task in Task::ALL {
        let test = splits(task).test;
        let pool = CandidatePool::build(task, &test).unwrap();
        let scores: Vec<Vec<f64>> = test
            .examples
            .iter()
            .map(|e| {
                let rel = pool.relevant(&e.label);
                (0..pool.len()).map(|i| if rel.contains(&i) { 1.0 } else { 0.0 }).collect()
            })
            .collect();
        let (results, skipped) = rank_dataset(&pool, &test, &scores, 64);
        assert!(!results.is_empty());
        assert_eq!(skipped + results.len(), test.len());
        assert_eq!(map_at_n(&results, 1), 1.0, "{task}");
    }
}

#[test]
fn report_covers_tasks_and_cutoffs() {
    let mut reports = Vec::new();
    for task in Task::ALL {
        let test = splits(task).test;
        let report = run_task(task, &test, &BagEmbedder, &DEFAULT_CUTOFFS).unwrap();
        assert_eq!(report.sessions + report.skipped, test.len());
        reports.push(report);
    }
    let maps = reports
        .iter()
        .flat_map(|r| &r.records)
        .filter(|r| r.metric == "map")
        .count();
    assert_eq!(maps, 9);
    let table = render_table(&reports);
    assert!(table.starts_with("# scale caveat"));
    assert!(table.contains("map@32"));
    let jsonl = reports[0].to_jsonl();
    assert_eq!(jsonl.lines().count(), 1 + 5 * DEFAULT_CUTOFFS.len());
    for line in jsonl.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
}

#[test]
fn wrong_variant_rejected() {
    let test = splits(Task::ProductSearch).test;
    assert!(matches!(
        run_task(Task::QuerySearch, &test, &BagEmbedder, &[1]),
        Err(EvalError::WrongVariant { .. })
    ));
}

#[test]
fn map_ordering_across_cutoffs() {
    let test = splits(Task::ProductSearch).test;
    let r = run_task(Task::ProductSearch, &test, &BagEmbedder, &DEFAULT_CUTOFFS).unwrap();
    let m = |n| r.value("map", n).unwrap();
    let rc = |n| r.value("recall", n).unwrap();
    assert!(m(1) <= m(32) && m(32) <= m(64));
    assert!(rc(1) <= rc(32) && rc(32) <= rc(64));
}

#[test]
fn strictly_monotone_transform_keeps_rankings() {
    let test = splits(Task::QuerySearch).test;
    let pool = CandidatePool::build(Task::QuerySearch, &test).unwrap();
    let scores = score_dataset(&pool, &test, &BagEmbedder).unwrap();
    let warped: Vec<Vec<f64>> = scores
        .iter()
        .map(|row| row.iter().map(|s| (3.0 * s).exp() - 7.0).collect())
        .collect();
    let (a, _) = rank_dataset(&pool, &test, &scores, 64);
    let (b, _) = rank_dataset(&pool, &test, &warped, 64);
    assert_eq!(a, b);
}

#[test]
fn scores_match_independent_cosine() {
    let test = splits(Task::ProductSearch).test;
    let pool = CandidatePool::build(Task::ProductSearch, &test).unwrap();
    let scores = score_dataset(&pool, &test, &BagEmbedder).unwrap();
    for (e, row) in test.examples.iter().zip(&scores).take(5) {
        let s = &BagEmbedder.embed_sessions(&[&e.session]).unwrap()[0];
        for (i, c) in pool.items().iter().enumerate() {
            let v = &BagEmbedder.embed_candidates(&[c.text()]).unwrap()[0];
            assert!((row[i] - cosine(s, v)).abs() < 1e-6);
        }
    }
}
