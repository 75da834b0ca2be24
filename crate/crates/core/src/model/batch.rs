//! Flattening of items and sessions into one token matrix.
//!
//! Every query, and every attribute of every product, becomes one token
//! sequence. All sequences of a batch are stacked row-wise so each layer runs
//! as a handful of large matrix products instead of many small ones.

use std::ops::Range;

use rand::RngCore;

use crate::codec::{mask, FieldClass, TokenId, TokenSeq, Vocab};
use crate::session::{Action, Attribute, ItemRef, Product, Query, Relation, SessionGraph};

use super::ModelError;

/// Number of learned edge-bias buckets in graph attention.
pub const NUM_EDGE_BUCKETS: usize = 11;

/// Bucket of a relation: self, previous-query distance 1, 2, 3, 4+, then
/// query-to-product and product-to-query by action.
pub fn edge_bucket(r: Relation) -> usize {
    let action = |a: Action| match a {
        Action::View => 0,
        Action::AddToCart => 1,
        Action::Purchase => 2,
    };
    match r {
        Relation::SelfLoop => 0,
        Relation::PreviousQuery { distance } => distance.clamp(1, 4),
        Relation::QueryToProduct(a) => 5 + action(a),
        Relation::ProductToQuery(a) => 8 + action(a),
    }
}

/// Something the item encoder can embed on its own.
#[derive(Debug, Clone, Copy)]
pub enum ItemText<'a> {
    Query(&'a Query),
    Product(&'a Product),
    Attribute(&'a Attribute),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqSpan {
    /// First row in the token matrix.
    pub start: usize,
    pub len: usize,
    pub class: FieldClass,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemSpan {
    /// Indices into `Batch::seqs`; one for queries and labels, one per
    /// attribute for products.
    pub seqs: Range<usize>,
    /// Rows of all its sequences, which are contiguous.
    pub tokens: Range<usize>,
    /// Position in its session's item order (0 for standalone items).
    pub item_pos: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionSpan {
    /// Indices into `Batch::items`, in session item order.
    pub items: Range<usize>,
    /// `relations[i][j]`: may item `i` attend to item `j` (local indices).
    pub relations: Vec<Vec<Option<Relation>>>,
    /// Undirected neighborhoods including self (local indices).
    pub neighborhoods: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub input_ids: Vec<TokenId>,
    pub target_ids: Vec<TokenId>,
    /// 1-based token positions; 0 is reserved for latent tokens.
    pub positions: Vec<usize>,
    pub seqs: Vec<SeqSpan>,
    pub items: Vec<ItemSpan>,
    pub sessions: Vec<SessionSpan>,
    /// Rows selected for masked-token prediction, ascending.
    pub masked: Vec<usize>,
    /// Sequences cut at `max_token_pos`.
    pub truncated: usize,
}

impl Batch {
    pub fn n_tokens(&self) -> usize {
        self.input_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    /// `(row in the gathered masked matrix, target id)` pairs for the loss.
    pub fn mask_targets(&self) -> Vec<(usize, usize)> {
        self.masked
            .iter()
            .enumerate()
            .map(|(i, &r)| (i, self.target_ids[r] as usize))
            .collect()
    }

    /// Standalone items: candidates, labels, or single-item sessions without
    /// graph structure.
    pub fn from_items(vocab: &Vocab, items: &[ItemText<'_>], max_token_pos: usize) -> Result<Self, ModelError> {
        let mut b = Batch::default();
        for item in items {
            b.push_item(vocab, *item, 0, max_token_pos, &mut None)?;
        }
        Ok(b)
    }

    pub fn from_sessions(
        vocab: &Vocab,
        sessions: &[&SessionGraph],
        max_token_pos: usize,
    ) -> Result<Self, ModelError> {
        Self::build(vocab, sessions, max_token_pos, None)
    }

    /// Like [`Batch::from_sessions`], masking every sequence for pretraining.
    pub fn from_sessions_masked(
        vocab: &Vocab,
        sessions: &[&SessionGraph],
        max_token_pos: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self, ModelError> {
        Self::build(vocab, sessions, max_token_pos, Some(rng))
    }

    fn build(
        vocab: &Vocab,
        sessions: &[&SessionGraph],
        max_token_pos: usize,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Self, ModelError> {
        let mut b = Batch::default();
        for s in sessions {
            let order = s.item_order();
            if order.is_empty() {
                return Err(ModelError::EmptySession(s.session_id.clone()));
            }
            let first = b.items.len();
            for (pos, item) in order.iter().enumerate() {
                let text = match *item {
                    ItemRef::Query(q) => ItemText::Query(&s.queries[q]),
                    ItemRef::Product(p) => ItemText::Product(&s.products[p]),
                };
                b.push_item(vocab, text, pos, max_token_pos, &mut rng)?;
            }
            b.sessions.push(SessionSpan {
                items: first..b.items.len(),
                relations: s.relations(),
                neighborhoods: s.neighborhoods(),
            });
        }
        Ok(b)
    }

    fn push_item(
        &mut self,
        vocab: &Vocab,
        item: ItemText<'_>,
        item_pos: usize,
        max_token_pos: usize,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<(), ModelError> {
        let seq_start = self.seqs.len();
        let tok_start = self.input_ids.len();
        match item {
            ItemText::Query(q) => {
                let seq = vocab.encode_query(q)?;
                self.push_seq(vocab, seq, FieldClass::Short, max_token_pos, rng)?;
            }
            ItemText::Attribute(a) => {
                let seq = vocab.encode_attribute(a)?;
                self.push_seq(vocab, seq, FieldClass::of_attribute(a), max_token_pos, rng)?;
            }
            ItemText::Product(p) => {
                if p.attributes.is_empty() {
                    return Err(ModelError::EmptyProduct(p.product_id.clone()));
                }
                for a in &p.attributes {
                    let seq = vocab.encode_attribute(a)?;
                    let class = FieldClass::of_attribute(a);
                    self.push_seq(vocab, seq, class, max_token_pos, rng)?;
                }
            }
        }
        self.items.push(ItemSpan {
            seqs: seq_start..self.seqs.len(),
            tokens: tok_start..self.input_ids.len(),
            item_pos,
        });
        Ok(())
    }

    fn push_seq(
        &mut self,
        vocab: &Vocab,
        mut seq: TokenSeq,
        class: FieldClass,
        max_token_pos: usize,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<(), ModelError> {
        if seq.ids.len() > max_token_pos {
            log::warn!(
                "sequence of {} tokens truncated to {max_token_pos}",
                seq.ids.len()
            );
            seq.ids.truncate(max_token_pos);
            self.truncated += 1;
        }
        let start = self.input_ids.len();
        match rng {
            Some(rng) => {
                let m = mask(vocab, &seq, class, &mut **rng);
                self.input_ids.extend(&m.input_ids);
                self.masked.extend(m.mask_positions.iter().map(|&p| start + p));
            }
            None => self.input_ids.extend(&seq.ids),
        }
        self.target_ids.extend(&seq.ids);
        self.positions.extend(1..=seq.ids.len());
        self.seqs.push(SeqSpan {
            start,
            len: seq.ids.len(),
            class,
        });
        Ok(())
    }
}
