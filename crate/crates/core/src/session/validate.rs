use std::collections::{HashMap, HashSet};

use super::graph::{Action, Edge, SessionGraph};

/// A broken session-graph law. Violations are data: callers decide whether a
/// session with violations is fatal.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Violation {
    #[error("session id is empty")]
    EmptySessionId,
    #[error("session has no queries")]
    NoQueries,
    #[error("query at position {position} has index {index}")]
    QueryIndex { position: usize, index: usize },
    #[error("query {index} has no tokens")]
    EmptyQuery { index: usize },
    #[error("product `{product}` appears more than once")]
    DuplicateProduct { product: String },
    #[error("product `{product}` has no attributes")]
    NoAttributes { product: String },
    #[error("product `{product}` starts with `{found}` instead of the product sequence")]
    FirstAttributeNotSequence { product: String, found: String },
    #[error("product `{product}` attribute {position} has an empty type")]
    EmptyAttributeType { product: String, position: usize },
    #[error("product `{product}` attribute `{attr_type}` has no tokens")]
    EmptyAttribute { product: String, attr_type: String },
    #[error("product `{product}` attribute `{attr_type}` segment lengths do not sum to its token count")]
    SegmentMismatch { product: String, attr_type: String },
    #[error("edge references query {index}, which does not exist")]
    UnknownQuery { index: usize },
    #[error("edge references product `{product}`, which does not exist")]
    UnknownProduct { product: String },
    #[error("query-query edge ({src}, {dst}) is not ordered earlier -> later")]
    QueryQueryOrder { src: usize, dst: usize },
    #[error("query-query edge ({src}, {dst}) has distance {distance}")]
    DistanceMismatch {
        src: usize,
        dst: usize,
        distance: usize,
    },
    #[error("product `{product}` has no query-product edge")]
    OrphanProduct { product: String },
    #[error("session has {count} purchase edges")]
    MultiplePurchases { count: usize },
    #[error("purchase record and purchase edges disagree")]
    PurchaseMismatch,
}

impl Violation {
    /// Stable snake_case code for reports and tests.
    pub fn code(&self) -> &'static str {
        match self {
            Violation::EmptySessionId => "empty_session_id",
            Violation::NoQueries => "no_queries",
            Violation::QueryIndex { .. } => "query_index",
            Violation::EmptyQuery { .. } => "empty_query",
            Violation::DuplicateProduct { .. } => "duplicate_product",
            Violation::NoAttributes { .. } => "no_attributes",
            Violation::FirstAttributeNotSequence { .. } => "first_attribute_not_sequence",
            Violation::EmptyAttributeType { .. } => "empty_attribute_type",
            Violation::EmptyAttribute { .. } => "empty_attribute",
            Violation::SegmentMismatch { .. } => "segment_mismatch",
            Violation::UnknownQuery { .. } => "unknown_query",
            Violation::UnknownProduct { .. } => "unknown_product",
            Violation::QueryQueryOrder { .. } => "query_query_order",
            Violation::DistanceMismatch { .. } => "distance_mismatch",
            Violation::OrphanProduct { .. } => "orphan_product",
            Violation::MultiplePurchases { .. } => "multiple_purchases",
            Violation::PurchaseMismatch => "purchase_mismatch",
        }
    }
}

/// Checks every session-graph invariant; an empty result means the session is
/// valid.
pub fn validate_session(s: &SessionGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    if s.session_id.is_empty() {
        out.push(Violation::EmptySessionId);
    }
    if s.queries.is_empty() {
        out.push(Violation::NoQueries);
    }
    for (position, q) in s.queries.iter().enumerate() {
        if q.index != position {
            out.push(Violation::QueryIndex {
                position,
                index: q.index,
            });
        }
        if q.tokens.is_empty() {
            out.push(Violation::EmptyQuery { index: q.index });
        }
    }

    let mut ids = HashSet::new();
    for p in &s.products {
        if !ids.insert(p.product_id.as_str()) {
            out.push(Violation::DuplicateProduct {
                product: p.product_id.clone(),
            });
        }
        match p.attributes.first() {
            None => out.push(Violation::NoAttributes {
                product: p.product_id.clone(),
            }),
            Some(first) if !first.is_product_sequence() => {
                out.push(Violation::FirstAttributeNotSequence {
                    product: p.product_id.clone(),
                    found: first.attr_type.clone(),
                })
            }
            Some(_) => {}
        }
        for (position, a) in p.attributes.iter().enumerate() {
            if a.attr_type.is_empty() {
                out.push(Violation::EmptyAttributeType {
                    product: p.product_id.clone(),
                    position,
                });
            }
            if a.tokens.is_empty() {
                out.push(Violation::EmptyAttribute {
                    product: p.product_id.clone(),
                    attr_type: a.attr_type.clone(),
                });
            }
            let segments_ok = if a.is_product_sequence() {
                a.segments.is_empty() || a.segments.iter().sum::<usize>() == a.tokens.len()
            } else {
                a.segments.is_empty()
            };
            if !segments_ok {
                out.push(Violation::SegmentMismatch {
                    product: p.product_id.clone(),
                    attr_type: a.attr_type.clone(),
                });
            }
        }
    }

    let nq = s.queries.len();
    let mut degree: HashMap<&str, usize> = HashMap::new();
    let mut purchases = Vec::new();
    for e in &s.edges {
        match e {
            Edge::QueryQuery { src, dst, distance } => {
                for &index in [src, dst] {
                    if index >= nq {
                        out.push(Violation::UnknownQuery { index });
                    }
                }
                if src >= dst {
                    out.push(Violation::QueryQueryOrder {
                        src: *src,
                        dst: *dst,
                    });
                } else if *distance != dst - src {
                    out.push(Violation::DistanceMismatch {
                        src: *src,
                        dst: *dst,
                        distance: *distance,
                    });
                }
            }
            Edge::QueryProduct {
                query,
                product,
                action,
            } => {
                if *query >= nq {
                    out.push(Violation::UnknownQuery { index: *query });
                }
                if !ids.contains(product.as_str()) {
                    out.push(Violation::UnknownProduct {
                        product: product.clone(),
                    });
                }
                *degree.entry(product.as_str()).or_default() += 1;
                if *action == Action::Purchase {
                    purchases.push((*query, product.as_str()));
                }
            }
        }
    }
    for p in &s.products {
        if !degree.contains_key(p.product_id.as_str()) {
            out.push(Violation::OrphanProduct {
                product: p.product_id.clone(),
            });
        }
    }
    if purchases.len() > 1 {
        out.push(Violation::MultiplePurchases {
            count: purchases.len(),
        });
    }
    let consistent = match (&s.purchase, purchases.as_slice()) {
        (None, []) => true,
        (Some(p), [(q, id)]) => p.query == *q && p.product == *id,
        (Some(_), []) | (None, [_]) => false,
        // Already reported as MultiplePurchases.
        _ => true,
    };
    if !consistent {
        out.push(Violation::PurchaseMismatch);
    }
    out
}
