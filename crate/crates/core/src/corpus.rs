//! Plain-text pretraining corpora derived from session files.
//!
//! Three formats:
//! - `product`: one paragraph per unique titled product.
//! - `sqsp`: one document per session, one line per query-product view pair.
//! - `session`: one document per session, items serialized in chronological order.
//!
//! Documents and paragraphs are separated by one blank line. Lines are never
//! wrapped.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::session::{Action, Product, SessionGraph};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("unknown corpus format `{0}` (expected product, sqsp or session)")]
    UnknownFormat(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Product,
    Sqsp,
    Session,
}

impl CorpusFormat {
    pub const ALL: [CorpusFormat; 3] = [CorpusFormat::Product, CorpusFormat::Sqsp, CorpusFormat::Session];

    pub fn as_str(self) -> &'static str {
        match self {
            CorpusFormat::Product => "product",
            CorpusFormat::Sqsp => "sqsp",
            CorpusFormat::Session => "session",
        }
    }
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| CorpusError::UnknownFormat(s.to_string()))
    }
}

/// `product_type` -> `Product Type`.
fn title_case(attr_type: &str) -> String {
    attr_type
        .split('_')
        .filter(|w| !w.is_empty())
        .map(|w| {
            let mut c = w.chars();
            match c.next() {
                Some(first) => first.to_uppercase().chain(c).collect(),
                None => String::new(),
            }
        })
        .collect::<Vec<String>>()
        .join(" ")
}

/// `product_type` -> `PRODUCT_TYPE`.
fn upper_snake(attr_type: &str) -> String {
    attr_type.to_uppercase()
}

fn field(out: &mut String, marker: &str, tokens: &[String]) {
    out.push('[');
    out.push_str(marker);
    out.push(']');
    for t in tokens {
        out.push(' ');
        out.push_str(t);
    }
}

fn product_paragraph(p: &Product) -> String {
    let mut out = String::new();
    field(&mut out, "Title", p.title());
    if let Some(seq) = p.sequence() {
        for bullet in seq.bullets() {
            out.push('\n');
            field(&mut out, "Bullet Description", bullet);
        }
    }
    for a in p.side_attributes() {
        out.push('\n');
        field(&mut out, &title_case(&a.attr_type), &a.tokens);
    }
    out
}

fn sqsp_line(query: &[String], p: &Product) -> String {
    let mut out = String::new();
    field(&mut out, "SEARCH", query);
    out.push(' ');
    field(&mut out, "TITLE", p.title());
    if let Some(seq) = p.sequence() {
        for bullet in seq.bullets() {
            out.push(' ');
            field(&mut out, "BULLET_DESCRIPTION", bullet);
        }
    }
    for a in p.side_attributes() {
        out.push(' ');
        field(&mut out, &upper_snake(&a.attr_type), &a.tokens);
    }
    out
}

fn action_marker(a: Action) -> &'static str {
    match a {
        Action::View => "CLICK",
        Action::AddToCart => "ADD_TO_CART",
        Action::Purchase => "PURCHASE",
    }
}

fn session_document(s: &SessionGraph) -> String {
    let mut out = String::new();
    let mut emitted = 0;
    let push_query = |out: &mut String, q: usize| {
        if !out.is_empty() {
            out.push(' ');
        }
        field(out, "SEARCH", &s.queries[q].tokens);
    };
    for (q, pid, action) in s.query_product_edges() {
        while emitted <= q && emitted < s.queries.len() {
            push_query(&mut out, emitted);
            emitted += 1;
        }
        let Some(p) = s.product(pid) else { continue };
        if !out.is_empty() {
            out.push(' ');
        }
        let _ = write!(out, "[{}] ", action_marker(action));
        field(&mut out, "TITLE", p.title());
    }
    while emitted < s.queries.len() {
        push_query(&mut out, emitted);
        emitted += 1;
    }
    out
}

/// Product paragraphs in order of first appearance; untitled products are
/// dropped and repeated ids are written once.
pub fn product_corpus(sessions: &[SessionGraph]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for s in sessions {
        for p in &s.products {
            if p.title().is_empty() || !seen.insert(p.product_id.as_str()) {
                continue;
            }
            out.push(product_paragraph(p));
        }
    }
    out
}

/// One document per session with at least one viewed product.
pub fn sqsp_corpus(sessions: &[SessionGraph]) -> Vec<String> {
    sessions
        .iter()
        .filter_map(|s| {
            let lines: Vec<String> = s
                .query_product_edges()
                .filter(|&(_, _, a)| a == Action::View)
                .filter_map(|(q, pid, _)| Some(sqsp_line(&s.queries.get(q)?.tokens, s.product(pid)?)))
                .collect();
            (!lines.is_empty()).then(|| lines.join("\n"))
        })
        .collect()
}

/// One document per non-empty session.
pub fn session_corpus(sessions: &[SessionGraph]) -> Vec<String> {
    sessions
        .iter()
        .map(session_document)
        .filter(|d| !d.is_empty())
        .collect()
}

/// Full corpus text. Every document ends with a newline; documents are
/// separated by a blank line.
pub fn render(sessions: &[SessionGraph], format: CorpusFormat) -> String {
    let docs = match format {
        CorpusFormat::Product => product_corpus(sessions),
        CorpusFormat::Sqsp => sqsp_corpus(sessions),
        CorpusFormat::Session => session_corpus(sessions),
    };
    let mut out = String::new();
    for (i, d) in docs.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(d);
        out.push('\n');
    }
    out
}

pub fn export(sessions: &[SessionGraph], format: CorpusFormat, out: &Path) -> Result<(), CorpusError> {
    fs::write(out, render(sessions, format)).map_err(|source| CorpusError::Io {
        path: out.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::{Attribute, Edge, Query};

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn attribute_names() {
        assert_eq!(title_case("product_type"), "Product Type");
        assert_eq!(title_case("color"), "Color");
        assert_eq!(upper_snake("entity_type"), "ENTITY_TYPE");
    }

    #[test]
    fn formats_parse() {
        for f in CorpusFormat::ALL {
            assert_eq!(f.as_str().parse::<CorpusFormat>().unwrap(), f);
        }
        assert!("Product".parse::<CorpusFormat>().is_err());
    }

    #[test]
    fn session_without_views_has_no_sqsp_document() {
        let mut s = SessionGraph::new("s");
        s.queries = vec![Query::new(0, toks("shoe"))];
        s.products = vec![Product::new("p", vec![Attribute::product_sequence(toks("red shoe"), vec![])])];
        s.edges = vec![Edge::query_product(0, "p", Action::Purchase)];
        assert!(sqsp_corpus(&[s.clone()]).is_empty());
        assert_eq!(render(&[s], CorpusFormat::Sqsp), "");
    }

    #[test]
    fn trailing_queries_follow_last_action() {
        let mut s = SessionGraph::new("s");
        s.queries = vec![Query::new(0, toks("a")), Query::new(1, toks("b"))];
        s.products = vec![Product::new("p", vec![Attribute::product_sequence(toks("t"), vec![])])];
        s.edges = vec![Edge::query_product(0, "p", Action::AddToCart)];
        assert_eq!(session_document(&s), "[SEARCH] a [ADD_TO_CART] [TITLE] t [SEARCH] b");
    }
}
