//! Session relational graph.
//!
//! A session holds an ordered list of queries, an unordered set of products and
//! the edges between them. Query-to-query edges are never stored: every query
//! links to all of its predecessors, so the chain is derived on demand by
//! [`derive_query_chain_edges`].

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Attribute type that always comes first in a product: title followed by the
/// bullet description.
pub const PRODUCT_SEQUENCE: &str = "product_sequence";

/// A search issued by the customer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Query {
    /// 0-based position in search order.
    pub index: usize,
    pub tokens: Vec<String>,
}

impl Query {
    pub fn new(index: usize, tokens: Vec<String>) -> Self {
        Self { index, tokens }
    }

    /// Space-joined token text, used as the grouping key for last queries.
    pub fn key(&self) -> String {
        self.tokens.join(" ")
    }
}

/// One row of a product's attribute table.
///
/// For the product sequence, `segments` records the lengths of the title and
/// of every bullet entry (in that order) so the title/bullet boundaries survive
/// the flat token list. Every other attribute has no segments.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Attribute {
    pub attr_type: String,
    pub tokens: Vec<String>,
    pub segments: Vec<usize>,
}

impl Attribute {
    pub fn new(attr_type: impl Into<String>, tokens: Vec<String>) -> Self {
        Self {
            attr_type: attr_type.into(),
            tokens,
            segments: Vec::new(),
        }
    }

    /// Builds the product sequence attribute from a title and bullet entries.
    pub fn product_sequence(title: Vec<String>, bullets: Vec<Vec<String>>) -> Self {
        let mut segments = Vec::with_capacity(bullets.len() + 1);
        segments.push(title.len());
        let mut tokens = title;
        for bullet in bullets {
            segments.push(bullet.len());
            tokens.extend(bullet);
        }
        Self {
            attr_type: PRODUCT_SEQUENCE.to_string(),
            tokens,
            segments,
        }
    }

    pub fn is_product_sequence(&self) -> bool {
        self.attr_type == PRODUCT_SEQUENCE
    }

    /// Title tokens of a product sequence; the whole token list otherwise.
    pub fn title(&self) -> &[String] {
        match self.segments.first() {
            Some(&n) if self.is_product_sequence() => &self.tokens[..n.min(self.tokens.len())],
            _ => &self.tokens,
        }
    }

    /// Bullet entries of a product sequence (empty for other attributes).
    pub fn bullets(&self) -> Vec<&[String]> {
        if !self.is_product_sequence() || self.segments.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(self.segments.len() - 1);
        let mut at = self.segments[0];
        for &len in &self.segments[1..] {
            let end = (at + len).min(self.tokens.len());
            out.push(&self.tokens[at.min(end)..end]);
            at = end;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Product {
    pub product_id: String,
    pub attributes: Vec<Attribute>,
}

impl Product {
    pub fn new(product_id: impl Into<String>, attributes: Vec<Attribute>) -> Self {
        Self {
            product_id: product_id.into(),
            attributes,
        }
    }

    /// The product sequence (attribute #1), if the table is well formed.
    pub fn sequence(&self) -> Option<&Attribute> {
        self.attributes.first().filter(|a| a.is_product_sequence())
    }

    pub fn title(&self) -> &[String] {
        self.sequence().map(Attribute::title).unwrap_or(&[])
    }

    pub fn attribute(&self, attr_type: &str) -> Option<&Attribute> {
        self.attributes.iter().find(|a| a.attr_type == attr_type)
    }

    /// Attributes other than the product sequence.
    pub fn side_attributes(&self) -> impl Iterator<Item = &Attribute> {
        self.attributes.iter().filter(|a| !a.is_product_sequence())
    }
}

/// Customer action on a retrieved product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// Clicks are normalized to views.
    #[serde(alias = "click")]
    View,
    AddToCart,
    Purchase,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::View, Action::AddToCart, Action::Purchase];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::View => "view",
            Action::AddToCart => "add_to_cart",
            Action::Purchase => "purchase",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown action `{0}` (expected view, click, add_to_cart or purchase)")]
pub struct UnknownAction(pub String);

impl FromStr for Action {
    type Err = UnknownAction;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "view" | "click" => Ok(Action::View),
            "add_to_cart" => Ok(Action::AddToCart),
            "purchase" => Ok(Action::Purchase),
            other => Err(UnknownAction(other.to_string())),
        }
    }
}

/// A typed session edge.
///
/// Query-query edges are stored as `(earlier, later)` and read as "later points
/// back to earlier".
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Edge {
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

impl Edge {
    pub fn query_product(query: usize, product: impl Into<String>, action: Action) -> Self {
        Edge::QueryProduct {
            query,
            product: product.into(),
            action,
        }
    }

    pub fn is_query_product(&self) -> bool {
        matches!(self, Edge::QueryProduct { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Purchase {
    pub query: usize,
    pub product: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionGraph {
    pub session_id: String,
    pub queries: Vec<Query>,
    pub products: Vec<Product>,
    /// Query-product edges in chronological order. Query-query edges may be
    /// present on hand-built sessions and are validated, but are dropped by
    /// [`SessionGraph::canonicalize`].
    pub edges: Vec<Edge>,
    pub purchase: Option<Purchase>,
    /// Planted intent of synthetic sessions; `None` for anything else.
    pub intent: Option<u32>,
}

/// Reference to one node of the session graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ItemRef {
    Query(usize),
    /// Index into `SessionGraph::products`.
    Product(usize),
}

/// Why item `i` may look at item `j` in the session graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relation {
    SelfLoop,
    /// `i` is a later query, `j` an earlier one, `distance = i - j`.
    PreviousQuery { distance: usize },
    QueryToProduct(Action),
    ProductToQuery(Action),
}

impl SessionGraph {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            queries: Vec::new(),
            products: Vec::new(),
            edges: Vec::new(),
            purchase: None,
            intent: None,
        }
    }

    pub fn product(&self, product_id: &str) -> Option<&Product> {
        self.products.iter().find(|p| p.product_id == product_id)
    }

    pub fn purchased_product(&self) -> Option<&Product> {
        self.purchase.as_ref().and_then(|p| self.product(&p.product))
    }

    pub fn query_product_edges(&self) -> impl Iterator<Item = (usize, &str, Action)> {
        self.edges.iter().filter_map(|e| match e {
            Edge::QueryProduct {
                query,
                product,
                action,
            } => Some((*query, product.as_str(), *action)),
            Edge::QueryQuery { .. } => None,
        })
    }

    /// Drops stored query-query edges; they are always re-derived.
    pub fn canonicalize(&mut self) {
        self.edges.retain(Edge::is_query_product);
    }

    /// Items in session order: queries by search index, then products by their
    /// first appearance in the edge list. Products without edges go last in
    /// list order.
    pub fn item_order(&self) -> Vec<ItemRef> {
        let mut items: Vec<ItemRef> = (0..self.queries.len()).map(ItemRef::Query).collect();
        let position: HashMap<&str, usize> = self
            .products
            .iter()
            .enumerate()
            .map(|(i, p)| (p.product_id.as_str(), i))
            .collect();
        let mut seen = vec![false; self.products.len()];
        for (_, product, _) in self.query_product_edges() {
            if let Some(&i) = position.get(product) {
                if !seen[i] {
                    seen[i] = true;
                    items.push(ItemRef::Product(i));
                }
            }
        }
        items.extend(
            seen.iter()
                .enumerate()
                .filter(|(_, s)| !**s)
                .map(|(i, _)| ItemRef::Product(i)),
        );
        items
    }

    /// Dense relation matrix over `item_order()`. Between a query and a product
    /// linked by several actions, the strongest action wins.
    pub fn relations(&self) -> Vec<Vec<Option<Relation>>> {
        let items = self.item_order();
        let n = items.len();
        let mut slot = HashMap::with_capacity(n);
        for (i, item) in items.iter().enumerate() {
            slot.insert(*item, i);
        }
        let mut rel = vec![vec![None; n]; n];
        for (i, row) in rel.iter_mut().enumerate() {
            row[i] = Some(Relation::SelfLoop);
        }
        let nq = self.queries.len();
        for later in 0..nq {
            for earlier in 0..later {
                rel[later][earlier] = Some(Relation::PreviousQuery {
                    distance: later - earlier,
                });
            }
        }
        let position: HashMap<&str, usize> = self
            .products
            .iter()
            .enumerate()
            .map(|(i, p)| (p.product_id.as_str(), i))
            .collect();
        for (query, product, action) in self.query_product_edges() {
            let (Some(&qi), Some(&pi)) = (
                slot.get(&ItemRef::Query(query)),
                position.get(product).and_then(|p| slot.get(&ItemRef::Product(*p))),
            ) else {
                continue;
            };
            let stronger = |cur: Option<Relation>, a: Action| match cur {
                Some(Relation::QueryToProduct(b)) | Some(Relation::ProductToQuery(b)) if b >= a => {
                    cur
                }
                _ => None,
            };
            rel[qi][pi] = stronger(rel[qi][pi], action).or(Some(Relation::QueryToProduct(action)));
            rel[pi][qi] = stronger(rel[pi][qi], action).or(Some(Relation::ProductToQuery(action)));
        }
        rel
    }

    /// Undirected neighborhoods over `item_order()`, each including the item
    /// itself, sorted ascending.
    pub fn neighborhoods(&self) -> Vec<Vec<usize>> {
        let rel = self.relations();
        let n = rel.len();
        (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| rel[i][j].is_some() || rel[j][i].is_some())
                    .collect()
            })
            .collect()
    }
}

/// All query-chain edges `(i, j)` with `i < j` and `distance = j - i`.
pub fn derive_query_chain_edges(s: &SessionGraph) -> Vec<Edge> {
    let n = s.queries.len();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for src in 0..n {
        for dst in src + 1..n {
            out.push(Edge::QueryQuery {
                src,
                dst,
                distance: dst - src,
            });
        }
    }
    out
}
