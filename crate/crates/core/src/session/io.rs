//! Line-delimited session files.
//!
//! The first line is the header `#ceres-sessions v1`; every following line is
//! one JSON object describing a session. See `docs/data-format.md`.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::{Action, Attribute, Edge, Product, Purchase, Query, SessionGraph};
use super::validate::validate_session;

pub const SESSIONS_HEADER: &str = "#ceres-sessions v1";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line 1: expected header `{SESSIONS_HEADER}`, found `{found}`")]
    Header { found: String },
    #[error("line {line}: at `{path}`: {message}")]
    Record {
        line: usize,
        path: String,
        message: String,
    },
    #[error("line {line}: session `{session}` is invalid: {violations}")]
    Invalid {
        line: usize,
        session: String,
        violations: String,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionRecord {
    session_id: String,
    queries: Vec<QueryRecord>,
    products: Vec<ProductRecord>,
    edges: Vec<EdgeRecord>,
    purchase: Option<PurchaseRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intent: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryRecord {
    index: usize,
    tokens: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProductRecord {
    product_id: String,
    attributes: Vec<AttributeRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttributeRecord {
    #[serde(rename = "type")]
    attr_type: String,
    tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    segments: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum EdgeRecord {
    QueryQuery {
        src: usize,
        dst: usize,
        distance: usize,
    },
    QueryProduct {
        query: usize,
        product: String,
        action: Action,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PurchaseRecord {
    query: usize,
    product: String,
}

impl From<&SessionGraph> for SessionRecord {
    fn from(s: &SessionGraph) -> Self {
        SessionRecord {
            session_id: s.session_id.clone(),
            queries: s
                .queries
                .iter()
                .map(|q| QueryRecord {
                    index: q.index,
                    tokens: q.tokens.clone(),
                })
                .collect(),
            products: s
                .products
                .iter()
                .map(|p| ProductRecord {
                    product_id: p.product_id.clone(),
                    attributes: p
                        .attributes
                        .iter()
                        .map(|a| AttributeRecord {
                            attr_type: a.attr_type.clone(),
                            tokens: a.tokens.clone(),
                            segments: a.segments.clone(),
                        })
                        .collect(),
                })
                .collect(),
            edges: s
                .query_product_edges()
                .map(|(query, product, action)| EdgeRecord::QueryProduct {
                    query,
                    product: product.to_string(),
                    action,
                })
                .collect(),
            purchase: s.purchase.as_ref().map(|p| PurchaseRecord {
                query: p.query,
                product: p.product.clone(),
            }),
            intent: s.intent,
        }
    }
}

impl From<SessionRecord> for SessionGraph {
    fn from(r: SessionRecord) -> Self {
        SessionGraph {
            session_id: r.session_id,
            queries: r
                .queries
                .into_iter()
                .map(|q| Query::new(q.index, q.tokens))
                .collect(),
            products: r
                .products
                .into_iter()
                .map(|p| Product {
                    product_id: p.product_id,
                    attributes: p
                        .attributes
                        .into_iter()
                        .map(|a| Attribute {
                            attr_type: a.attr_type,
                            tokens: a.tokens,
                            segments: a.segments,
                        })
                        .collect(),
                })
                .collect(),
            edges: r
                .edges
                .into_iter()
                .map(|e| match e {
                    EdgeRecord::QueryQuery { src, dst, distance } => {
                        Edge::QueryQuery { src, dst, distance }
                    }
                    EdgeRecord::QueryProduct {
                        query,
                        product,
                        action,
                    } => Edge::QueryProduct {
                        query,
                        product,
                        action,
                    },
                })
                .collect(),
            purchase: r.purchase.map(|p| Purchase {
                query: p.query,
                product: p.product,
            }),
            intent: r.intent,
        }
    }
}

/// Serializes one session as a single JSON line (no trailing newline).
pub fn session_to_line(s: &SessionGraph) -> String {
    serde_json::to_string(&SessionRecord::from(s)).expect("session records always serialize")
}

/// Parses, validates and canonicalizes one record. `line` is only used for
/// error messages.
pub fn session_from_line(text: &str, line: usize) -> Result<SessionGraph, FormatError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let record: SessionRecord =
        serde_path_to_error::deserialize(&mut de).map_err(|e| FormatError::Record {
            line,
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
    de.end().map_err(|e| FormatError::Record {
        line,
        path: ".".into(),
        message: e.to_string(),
    })?;
    let mut session = SessionGraph::from(record);
    let violations = validate_session(&session);
    if !violations.is_empty() {
        return Err(FormatError::Invalid {
            line,
            session: session.session_id,
            violations: violations
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; "),
        });
    }
    session.canonicalize();
    Ok(session)
}

/// Streaming reader over a session file.
pub struct SessionReader<R> {
    lines: io::Lines<R>,
    line: usize,
}

impl<R: BufRead> SessionReader<R> {
    pub fn new(reader: R) -> Result<Self, FormatError> {
        let mut lines = reader.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim_end() != SESSIONS_HEADER {
            return Err(FormatError::Header { found: header });
        }
        Ok(Self { lines, line: 1 })
    }
}

impl<R: BufRead> Iterator for SessionReader<R> {
    type Item = Result<SessionGraph, FormatError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(e) => return Some(Err(e.into())),
            };
            self.line += 1;
            if text.trim().is_empty() {
                continue;
            }
            return Some(session_from_line(&text, self.line));
        }
    }
}

pub fn read_sessions(path: impl AsRef<Path>) -> Result<Vec<SessionGraph>, FormatError> {
    let file = File::open(path)?;
    SessionReader::new(BufReader::new(file))?.collect()
}

pub fn write_sessions_to<W: Write>(mut w: W, sessions: &[SessionGraph]) -> io::Result<()> {
    writeln!(w, "{SESSIONS_HEADER}")?;
    for s in sessions {
        writeln!(w, "{}", session_to_line(s))?;
    }
    w.flush()
}

pub fn write_sessions(path: impl AsRef<Path>, sessions: &[SessionGraph]) -> io::Result<()> {
    write_sessions_to(BufWriter::new(File::create(path)?), sessions)
}
