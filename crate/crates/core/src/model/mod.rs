//! The CERES architecture: an item transformer encoder, a position-aware
//! graph attention network over the session graph, latent conditioning tokens
//! and a cross-attention transformer, with LM heads tied to the token
//! embedding table.

mod batch;
mod config;


use std::sync::Arc;

use rand::Rng;

use crate::codec::CodecError;
use crate::nn::{
    normal_tensor, AttnLayout, LayerNorm, Linear, NnError, ParamId, ParamStore, Real, Segment,
    Tape, Tensor, TransformerBlock, Var,
};

pub use batch::{edge_bucket, Batch, ItemSpan, ItemText, SeqSpan, SessionSpan, NUM_EDGE_BUCKETS};
pub use config::CeresConfig;

/// Standard deviation of embedding initialisation.
pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("session `{0}` has no items")]
    EmptySession(String),
    #[error("product `{0}` has no attributes")]
    EmptyProduct(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Which tied LM head to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Predicts masked tokens from item-level context only.
    Intra,
    /// Predicts masked tokens from the graph-conditioned outputs.
    Gmlm,
}

/// Parameter handles of a CERES model; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct CeresModel {
    pub config: CeresConfig,
    pub tok_emb: ParamId,
    pub tok_pos: ParamId,
    pub item_blocks: Vec<TransformerBlock>,
    pub item_ln: LayerNorm,
    pub intra_bias: ParamId,
    pub item_pos: ParamId,
    pub gnn_blocks: Vec<TransformerBlock>,
    pub edge_bias: Vec<ParamId>,
    pub lat_fc1: Linear,
    pub lat_fc2: Linear,
    pub cond_blocks: Vec<TransformerBlock>,
    pub cond_ln: LayerNorm,
    pub gmlm_bias: ParamId,
}

/// Item encoder outputs for a whole batch.
#[derive(Debug, Clone, Copy)]
pub struct ItemOutputs {
    /// `n_tokens x d`, the per-token embeddings.
    pub tokens: Var,
    /// `n_items x d`, one pooled vector per item.
    pub pooled: Var,
}

/// Cross-attention outputs; rows follow [`CondLayout`].
#[derive(Debug, Clone)]
pub struct CondOutputs {
    /// Output of every conditional block, before the final layer norm.
    pub layers: Vec<Var>,
    /// Final normalized sequence matrix.
    pub seq: Var,
    pub layout: CondLayout,
}

/// Row layout of the cross-attention sequence matrix: each item contributes
/// its `K` latent rows followed by its token rows.
#[derive(Debug, Clone)]
pub struct CondLayout {
    /// Row of each batch token in the sequence matrix.
    pub token_rows: Vec<usize>,
    /// Latent rows of every item.
    pub latent_rows: Vec<Vec<usize>>,
}

/// Losses of one pretraining forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PretrainLosses {
    pub intra: Var,
    pub gmlm: Option<Var>,
    pub total: Var,
}

fn embedding<F: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<F> {
    normal_tensor(rows, cols, EMBED_INIT_STD, rng)
}

impl CeresModel {
    /// Registers freshly initialised parameters in `store`.
    pub fn new<F: Real, R: Rng + ?Sized>(
        config: CeresConfig,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let (d, h) = (config.d, config.heads);
        let tok_emb = store.insert("tok_emb", embedding(config.vocab_size, d, rng))?;
        let tok_pos = store.insert("tok_pos", embedding(config.max_token_pos + 1, d, rng))?;
        let item_blocks = (0..config.item_layers)
            .map(|l| TransformerBlock::new(store, &format!("item.{l}"), d, h, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let item_ln = LayerNorm::new(store, "item.ln_f", d)?;
        let intra_bias = store.insert("head.intra.b", Tensor::zeros(1, config.vocab_size))?;
        let item_pos = store.insert("item_pos", embedding(config.max_item_pos, d, rng))?;
        let mut gnn_blocks = Vec::new();
        let mut edge_bias = Vec::new();
        for l in 0..config.gat_layers {
            gnn_blocks.push(TransformerBlock::new(store, &format!("gnn.{l}"), d, h, rng)?);
            edge_bias.push(store.insert(
                format!("gnn.{l}.edge_bias"),
                Tensor::zeros(1, NUM_EDGE_BUCKETS),
            )?);
        }
        let lat_fc1 = Linear::new(store, "lat.fc1", d, d, true, rng)?;
        let lat_fc2 = Linear::new(store, "lat.fc2", d, config.k_latent * d, true, rng)?;
        let cond_blocks = (0..config.cond_layers)
            .map(|l| TransformerBlock::new(store, &format!("cond.{l}"), d, h, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let cond_ln = LayerNorm::new(store, "cond.ln_f", d)?;
        let gmlm_bias = store.insert("head.gmlm.b", Tensor::zeros(1, config.vocab_size))?;
        Ok(Self {
            config,
            tok_emb,
            tok_pos,
            item_blocks,
            item_ln,
            intra_bias,
            item_pos,
            gnn_blocks,
            edge_bias,
            lat_fc1,
            lat_fc2,
            cond_blocks,
            cond_ln,
            gmlm_bias,
        })
    }

    /// Token embeddings `v_ij` and pooled item vectors `v_i`. Queries pool
    /// their `[SEARCH]` output; attributes their `[ATTR:*]` output; products
    /// average their attributes' pooled vectors.
    pub fn encode_items<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        batch: &Batch,
    ) -> Result<ItemOutputs, ModelError> {
        let ids: Vec<usize> = batch.input_ids.iter().map(|&i| i as usize).collect();
        let emb = tape.param(store, self.tok_emb);
        let pos_table = tape.param(store, self.tok_pos);
        let x = tape.gather_rows(emb, &ids)?;
        let p = tape.gather_rows(pos_table, &batch.positions)?;
        let mut x = tape.add(x, p)?;
        let layout = Arc::new(AttnLayout::new(
            batch
                .seqs
                .iter()
                .map(|s| Segment::square(s.start, s.len))
                .collect(),
        ));
        for blk in &self.item_blocks {
            x = blk.forward(tape, store, x, layout.clone(), None)?;
        }
        let tokens = self.item_ln.forward(tape, store, x)?;
        let pool: Vec<Vec<(usize, F)>> = batch
            .items
            .iter()
            .map(|item| {
                let w = F::one() / F::lit(item.seqs.len() as f64);
                batch.seqs[item.seqs.clone()]
                    .iter()
                    .map(|s| (s.start, w))
                    .collect()
            })
            .collect();
        let pooled = tape.combine_rows(tokens, Arc::new(pool))?;
        Ok(ItemOutputs { tokens, pooled })
    }

    /// Session-level item embeddings `v^h`: pooled vectors plus the item
    /// positional embedding, refined by graph attention over each session.
    /// Standalone items (outside any session) keep their pooled vector plus
    /// position.
    pub fn pgnn<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        batch: &Batch,
        pooled: Var,
    ) -> Result<Var, ModelError> {
        let last = self.config.max_item_pos - 1;
        let pos_idx: Vec<usize> = batch.items.iter().map(|i| i.item_pos.min(last)).collect();
        let table = tape.param(store, self.item_pos);
        let pos = tape.gather_rows(table, &pos_idx)?;
        let mut h = tape.add(pooled, pos)?;
        if !self.config.use_gnn {
            return Ok(h);
        }
        let layout = Arc::new(graph_layout(batch));
        for (blk, &bias) in self.gnn_blocks.iter().zip(&self.edge_bias) {
            let b = tape.param(store, bias);
            h = blk.forward(tape, store, h, layout.clone(), Some(b))?;
        }
        Ok(h)
    }

    /// `K` latent tokens per item (`n_items * K x d`, item-major): an MLP of
    /// `v^h`, then slot-wise averaged over each item's undirected
    /// neighborhood including itself.
    pub fn latent_tokens<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        batch: &Batch,
        vh: Var,
    ) -> Result<Var, ModelError> {
        let (k, d) = (self.config.k_latent, self.config.d);
        let m = self.lat_fc1.forward(tape, store, vh)?;
        let m = tape.gelu(m);
        let m = self.lat_fc2.forward(tape, store, m)?;
        let m = tape.reshape(m, batch.n_items() * k, d)?;
        let mut hood: Vec<Vec<usize>> = (0..batch.n_items()).map(|i| vec![i]).collect();
        for s in &batch.sessions {
            for (local, n) in s.neighborhoods.iter().enumerate() {
                hood[s.items.start + local] = n.iter().map(|&j| s.items.start + j).collect();
            }
        }
        let mut rows = Vec::with_capacity(batch.n_items() * k);
        for h in &hood {
            let w = F::one() / F::lit(h.len() as f64);
            for slot in 0..k {
                rows.push(h.iter().map(|&j| (j * k + slot, w)).collect());
            }
        }
        Ok(tape.combine_rows(m, Arc::new(rows))?)
    }

    /// Conditional transformer over `[latents ; item tokens]` per item.
    /// Latent rows only see latent columns; token rows see everything.
    pub fn cross_attention<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        batch: &Batch,
        tokens: Var,
        latents: Var,
    ) -> Result<CondOutputs, ModelError> {
        let k = self.config.k_latent;
        let n_lat = batch.n_items() * k;
        let pos_table = tape.param(store, self.tok_pos);
        let pos0 = tape.gather_rows(pos_table, &[0])?;
        let lat = tape.add_row(latents, pos0)?;
        let all = tape.concat_rows(&[lat, tokens])?;

        let mut order = Vec::with_capacity(n_lat + batch.n_tokens());
        let mut segments = Vec::with_capacity(2 * batch.n_items());
        let mut token_rows = vec![0; batch.n_tokens()];
        let mut latent_rows = Vec::with_capacity(batch.n_items());
        for (i, item) in batch.items.iter().enumerate() {
            let base = order.len();
            order.extend(i * k..(i + 1) * k);
            latent_rows.push((base..base + k).collect());
            for (off, t) in item.tokens.clone().enumerate() {
                order.push(n_lat + t);
                token_rows[t] = base + k + off;
            }
            let t_len = item.tokens.len();
            segments.push(Segment {
                q_start: base,
                q_len: k,
                k_start: base,
                k_len: k,
                mask: None,
                bias: None,
            });
            segments.push(Segment {
                q_start: base + k,
                q_len: t_len,
                k_start: base,
                k_len: k + t_len,
                mask: None,
                bias: None,
            });
        }
        let mut x = tape.gather_rows(all, &order)?;
        let layout = Arc::new(AttnLayout::new(segments));
        let mut layers = Vec::with_capacity(self.cond_blocks.len());
        for blk in &self.cond_blocks {
            x = blk.forward(tape, store, x, layout.clone(), None)?;
            layers.push(x);
        }
        let seq = self.cond_ln.forward(tape, store, x)?;
        Ok(CondOutputs {
            layers,
            seq,
            layout: CondLayout {
                token_rows,
                latent_rows,
            },
        })
    }

    /// Full conditional path for a session batch; returns item outputs and
    /// the cross-attention outputs.
    pub fn condition<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        batch: &Batch,
    ) -> Result<(ItemOutputs, CondOutputs), ModelError> {
        let items = self.encode_items(tape, store, batch)?;
        let vh = self.pgnn(tape, store, batch, items.pooled)?;
        let lat = self.latent_tokens(tape, store, batch, vh)?;
        let cond = self.cross_attention(tape, store, batch, items.tokens, lat)?;
        Ok((items, cond))
    }

    /// Vocabulary logits, `h E^T + b`, with `E` the token-embedding table.
    pub fn lm_logits<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        h: Var,
        head: Head,
    ) -> Result<Var, ModelError> {
        let emb = tape.param(store, self.tok_emb);
        let logits = tape.matmul_nt(h, emb)?;
        let bias = match head {
            Head::Intra => self.intra_bias,
            Head::Gmlm => self.gmlm_bias,
        };
        let b = tape.param(store, bias);
        Ok(tape.add_row(logits, b)?)
    }

    /// Intra-item cross entropy plus, when `use_cond` is set, the
    /// graph-conditioned cross entropy at the same masked positions.
    pub fn pretrain_losses<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        batch: &Batch,
    ) -> Result<PretrainLosses, ModelError> {
        let targets = batch.mask_targets();
        let (items, cond) = if self.config.use_cond {
            let (i, c) = self.condition(tape, store, batch)?;
            (i, Some(c))
        } else {
            (self.encode_items(tape, store, batch)?, None)
        };
        let h = tape.gather_rows(items.tokens, &batch.masked)?;
        let logits = self.lm_logits(tape, store, h, Head::Intra)?;
        let intra = tape.cross_entropy(logits, &targets)?;
        let Some(cond) = cond else {
            return Ok(PretrainLosses {
                intra,
                gmlm: None,
                total: intra,
            });
        };
        let rows: Vec<usize> = batch
            .masked
            .iter()
            .map(|&r| cond.layout.token_rows[r])
            .collect();
        let h = tape.gather_rows(cond.seq, &rows)?;
        let logits = self.lm_logits(tape, store, h, Head::Gmlm)?;
        let gmlm = tape.cross_entropy(logits, &targets)?;
        let total = tape.add(intra, gmlm)?;
        Ok(PretrainLosses {
            intra,
            gmlm: Some(gmlm),
            total,
        })
    }

    /// One embedding per session: with `use_cond`, the mean over items of
    /// their mean conditional token outputs; otherwise the mean of the item
    /// encoder's pooled vectors.
    pub fn embed_sessions<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        batch: &Batch,
        use_cond: bool,
    ) -> Result<Var, ModelError> {
        if use_cond {
            let (_, cond) = self.condition(tape, store, batch)?;
            let rows = batch
                .sessions
                .iter()
                .map(|s| {
                    let wi = 1.0 / s.items.len() as f64;
                    batch.items[s.items.clone()]
                        .iter()
                        .flat_map(|item| {
                            let w = F::lit(wi / item.tokens.len() as f64);
                            let rows = &cond.layout.token_rows;
                            item.tokens.clone().map(move |t| (rows[t], w))
                        })
                        .collect()
                })
                .collect();
            Ok(tape.combine_rows(cond.seq, Arc::new(rows))?)
        } else {
            let items = self.encode_items(tape, store, batch)?;
            let groups: Vec<Vec<usize>> = batch.sessions.iter().map(|s| s.items.clone().collect()).collect();
            Ok(tape.mean_rows(items.pooled, &groups)?)
        }
    }

    /// Item-encoder-only embeddings of standalone candidates.
    pub fn embed_items<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        batch: &Batch,
    ) -> Result<Var, ModelError> {
        Ok(self.encode_items(tape, store, batch)?.pooled)
    }
}

/// One graph-attention segment per session: item `i` may attend to `j` when
/// the session graph relates them, with the relation's bucket as logit bias.
pub fn graph_layout(batch: &Batch) -> AttnLayout {
    let segments = batch
        .sessions
        .iter()
        .map(|s| {
            let n = s.items.len();
            let mut mask = Vec::with_capacity(n * n);
            let mut bias = Vec::with_capacity(n * n);
            for row in &s.relations {
                for rel in row {
                    mask.push(rel.is_some());
                    bias.push(rel.map_or(0, edge_bucket));
                }
            }
            let mut seg = Segment::square(s.items.start, n);
            seg.mask = Some(mask);
            seg.bias = Some(bias);
            seg
        })
        .collect();
    AttnLayout::new(segments)
}
