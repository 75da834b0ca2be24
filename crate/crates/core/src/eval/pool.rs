//! Candidate pools of the three retrieval tasks.

use std::collections::{BTreeMap, HashMap};

use crate::model::ItemText;
use crate::session::{Attribute, Label, Product, Query, TaskDataset};

use super::{EvalError, Task};

/// Interacted products kept per last query as hard distractors.
pub const DISTRACTORS_PER_QUERY: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CandidateItem {
    Product(Product),
    Query(Query),
    Attribute(Attribute),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub id: String,
    pub item: CandidateItem,
}

impl Candidate {
    pub fn product(p: &Product) -> Self {
        Self {
            id: p.product_id.clone(),
            item: CandidateItem::Product(p.clone()),
        }
    }

    pub fn query(q: &Query) -> Self {
        Self {
            id: q.key(),
            item: CandidateItem::Query(q.clone()),
        }
    }

    pub fn attribute(a: &Attribute) -> Self {
        Self {
            id: attribute_id(a),
            item: CandidateItem::Attribute(a.clone()),
        }
    }

    pub fn text(&self) -> ItemText<'_> {
        match &self.item {
            CandidateItem::Product(p) => ItemText::Product(p),
            CandidateItem::Query(q) => ItemText::Query(q),
            CandidateItem::Attribute(a) => ItemText::Attribute(a),
        }
    }
}

/// `type=tok tok ...`, the identity of an attribute label.
pub fn attribute_id(a: &Attribute) -> String {
    format!("{}={}", a.attr_type, a.tokens.join(" "))
}

/// Ids a session is credited for, in credit order.
pub fn relevant_ids(task: Task, label: &Label) -> Vec<String> {
    match task {
        Task::ProductSearch => vec![label.product.product_id.clone()],
        Task::QuerySearch => vec![label.last_query.key()],
        Task::EntityLinking => label.attributes.iter().map(attribute_id).collect(),
    }
}

/// Unique candidates sorted by ascending id.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    pub task: Task,
    items: Vec<Candidate>,
    index: HashMap<String, usize>,
}

impl CandidatePool {
    /// Deduplicates by id (first occurrence wins) and sorts by id.
    pub fn from_candidates(task: Task, candidates: impl IntoIterator<Item = Candidate>) -> Result<Self, EvalError> {
        let mut by_id = BTreeMap::new();
        for c in candidates {
            by_id.entry(c.id.clone()).or_insert(c);
        }
        if by_id.is_empty() {
            return Err(EvalError::EmptyPool(task));
        }
        let items: Vec<Candidate> = by_id.into_values().collect();
        let index = items.iter().enumerate().map(|(i, c)| (c.id.clone(), i)).collect();
        Ok(Self { task, items, index })
    }

    /// The task's pool over a dataset split.
    ///
    /// Product search: every purchased product plus the first
    /// [`DISTRACTORS_PER_QUERY`] products interacted with under each last
    /// query. Query search: every last query. Entity linking: every attribute
    /// label of a purchased product.
    pub fn build(task: Task, data: &TaskDataset) -> Result<Self, EvalError> {
        let mut out = Vec::new();
        match task {
            Task::ProductSearch => {
                let mut seen: HashMap<String, Vec<String>> = HashMap::new();
                for e in &data.examples {
                    out.push(Candidate::product(&e.label.product));
                    let key = e.label.last_query.key();
                    let taken = seen.entry(key.clone()).or_default();
                    let s = &e.session;
                    for (q, pid, _) in s.query_product_edges() {
                        if taken.len() >= DISTRACTORS_PER_QUERY {
                            break;
                        }
                        if s.queries[q].key() != key || taken.iter().any(|t| t == pid) {
                            continue;
                        }
                        if let Some(p) = s.product(pid) {
                            taken.push(pid.to_string());
                            out.push(Candidate::product(p));
                        }
                    }
                }
            }
            Task::QuerySearch => {
                out.extend(data.examples.iter().map(|e| Candidate::query(&e.label.last_query)));
            }
            Task::EntityLinking => {
                for e in &data.examples {
                    out.extend(e.label.attributes.iter().map(Candidate::attribute));
                }
            }
        }
        Self::from_candidates(task, out)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Candidate] {
        &self.items
    }

    pub fn get(&self, i: usize) -> &Candidate {
        &self.items[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Pool indices of the label's relevant candidates, in credit order.
    pub fn relevant(&self, label: &Label) -> Vec<usize> {
        relevant_ids(self.task, label)
            .iter()
            .filter_map(|id| self.index_of(id))
            .collect()
    }
}
