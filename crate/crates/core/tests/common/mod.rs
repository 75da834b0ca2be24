//! Fixtures shared by integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use ceres_core::corpus::CorpusFormat;
use ceres_core::session::{Action, Attribute, Edge, Product, Purchase, Query, SessionGraph};

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

pub fn golden_path(format: CorpusFormat) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(format!("{}.txt", format.as_str()))
}

fn titled(id: &str, title: &str, bullets: &[&str], attrs: &[(&str, &str)]) -> Product {
    let mut attributes = vec![Attribute::product_sequence(
        toks(title),
        bullets.iter().map(|b| toks(b)).collect(),
    )];
    attributes.extend(attrs.iter().map(|(t, v)| Attribute::new(*t, toks(v))));
    Product::new(id, attributes)
}

/// The session each golden file was written from.
pub fn golden_sessions(format: CorpusFormat) -> Vec<SessionGraph> {
    match format {
        CorpusFormat::Product => {
            let mut s = SessionGraph::new("product");
            s.queries = vec![Query::new(0, toks("coffee"))];
            s.products = vec![titled(
                "p",
                "Product Title",
                &["Description bullet 1", "Description bullet 2"],
                &[("product_type", "Product Type"), ("color", "Color")],
            )];
            s.edges = vec![Edge::query_product(0, "p", Action::View)];
            vec![s]
        }
        CorpusFormat::Sqsp => {
            let mut s = SessionGraph::new("sqsp");
            s.queries = vec![Query::new(0, toks("search keywords"))];
            s.products = vec![titled("p", "product title", &["description"], &[("entity_type", "entity type")])];
            s.edges = vec![Edge::query_product(0, "p", Action::View)];
            vec![s]
        }
        CorpusFormat::Session => {
            let mut s = SessionGraph::new("session");
            s.queries = vec![
                Query::new(0, toks("keywords 1")),
                Query::new(1, toks("keywords 2")),
                Query::new(2, toks("keywords 3")),
            ];
            s.products = vec![titled("p1", "product 1", &[], &[]), titled("p2", "product 2", &[], &[])];
            s.edges = vec![
                Edge::query_product(1, "p1", Action::View),
                Edge::query_product(2, "p2", Action::Purchase),
            ];
            s.purchase = Some(Purchase {
                query: 2,
                product: "p2".into(),
            });
            vec![s]
        }
    }
}
