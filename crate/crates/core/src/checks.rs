//! Self-contained correctness checks, shared by the command line and the
//! acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{mask, FieldClass, TokenSeq, Vocab};
use crate::eval::{map_at_n, oracle, RankedResult};
use crate::model::{Batch, CeresConfig, CeresModel, Head, ItemSpan, ModelError, SeqSpan, NUM_EDGE_BUCKETS};
use crate::nn::{gradcheck, normal_tensor, AttentionMask, GradcheckOptions, GradcheckReport, ParamStore, Tape};
use crate::session::{Action, Attribute, Edge, Product, Purchase, Query, Relation, SessionGraph};
use crate::synth::{generate, GenConfig};

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Two queries and two products: a view after the first query, a view and a
/// purchase after the second.
pub fn toy_session() -> SessionGraph {
    let product = |id: &str, title: &str, bullet: &str, color: &str| {
        Product::new(
            id,
            vec![
                Attribute::product_sequence(toks(title), vec![toks(bullet)]),
                Attribute::new("color", toks(color)),
            ],
        )
    };
    let mut s = SessionGraph::new("toy");
    s.queries = vec![Query::new(0, toks("red shoe")), Query::new(1, toks("red running shoe"))];
    s.products = vec![
        product("p1", "nike red running shoe", "light mesh", "red"),
        product("p2", "adidas blue shoe", "soft sole", "blue"),
    ];
    s.edges = vec![
        Edge::query_product(0, "p2", Action::View),
        Edge::query_product(1, "p1", Action::View),
        Edge::query_product(1, "p1", Action::Purchase),
    ];
    s.purchase = Some(Purchase {
        query: 1,
        product: "p1".into(),
    });
    s
}

/// A model small enough for finite differences.
pub fn tiny_config(vocab_size: usize) -> CeresConfig {
    CeresConfig {
        d: 8,
        item_layers: 1,
        heads: 2,
        gat_layers: 1,
        cond_layers: 2,
        k_latent: 2,
        max_token_pos: 16,
        max_item_pos: 8,
        vocab_size,
        use_gnn: true,
        use_cond: true,
    }
}

fn tiny_model(cfg: CeresConfig, seed: u64) -> Result<(CeresModel, ParamStore<f64>), ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let m = CeresModel::new(cfg, &mut store, &mut rng)?;
    // Edge biases start at zero; give them values so their gradients show.
    for &b in &m.edge_bias {
        *store.value_mut(b) = normal_tensor(1, NUM_EDGE_BUCKETS, 0.5, &mut rng);
    }
    Ok((m, store))
}

/// Full-model gradient check of the pretraining loss on [`toy_session`], in
/// 64-bit with central differences.
pub fn gradcheck_model(seed: u64) -> Result<GradcheckReport, ModelError> {
    let s = toy_session();
    let vocab = Vocab::from_sessions([&s])?;
    let (m, store) = tiny_model(tiny_config(vocab.len()), seed)?;
    let mut b = Batch::from_sessions(&vocab, &[&s], 16)?;
    // One masked content token per sequence, so both heads see every item.
    for seq in b.seqs.clone() {
        let row = seq.start + seq.len - 1;
        b.masked.push(row);
        b.input_ids[row] = vocab.mask_id();
    }
    let report = gradcheck(
        &store,
        |tape, st| match m.pretrain_losses(tape, st, &b) {
            Ok(l) => Ok(l.total),
            Err(ModelError::Nn(e)) => Err(e),
            Err(other) => panic!("{other}"),
        },
        GradcheckOptions::default(),
    )?;
    Ok(report)
}

fn small_corpus(sessions: usize, seed: u64) -> Result<(Vocab, Vec<SessionGraph>), ModelError> {
    let cfg = GenConfig {
        num_sessions: sessions,
        vocab_topics: 4,
        products_per_topic: 6,
        desk_factor: 0.05,
        seed,
        catalog_seed: seed,
        ..GenConfig::default()
    };
    let sessions = generate(&cfg).map_err(|e| ModelError::Config(e.to_string()))?;
    Ok((cfg.vocab()?, sessions))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentIsolation {
    pub sessions: usize,
    /// Latent activations compared across all conditional layers.
    pub compared: usize,
    /// Largest latent change; the invariant requires exactly zero.
    pub max_latent_diff: f64,
    /// Smallest change of a token row, to show the noise reached the tokens.
    pub min_token_diff: f64,
}

/// Replaces every item-token input of the cross-attention with Gaussian noise
/// and compares all latent activations against the clean pass.
pub fn latent_isolation(sessions: usize, seed: u64) -> Result<LatentIsolation, ModelError> {
    let (vocab, corpus) = small_corpus(sessions, seed)?;
    let cfg = CeresConfig {
        d: 16,
        item_layers: 1,
        gat_layers: 1,
        cond_layers: 2,
        k_latent: 3,
        vocab_size: vocab.len(),
        ..CeresConfig::default()
    };
    let (m, store) = tiny_model(cfg, seed)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut out = LatentIsolation {
        sessions: corpus.len(),
        compared: 0,
        max_latent_diff: 0.0,
        min_token_diff: f64::INFINITY,
    };
    for s in &corpus {
        let b = Batch::from_sessions(&vocab, &[s], m.config.max_token_pos)?;
        let noise = normal_tensor(b.n_tokens(), m.config.d, 3.0, &mut noise_rng);
        let run = |noisy: bool| -> Result<(Vec<f64>, Vec<f64>), ModelError> {
            let mut tape = Tape::<f64>::new();
            let items = m.encode_items(&mut tape, &store, &b)?;
            let vh = m.pgnn(&mut tape, &store, &b, items.pooled)?;
            let lat = m.latent_tokens(&mut tape, &store, &b, vh)?;
            let tokens = if noisy { tape.constant(noise.clone()) } else { items.tokens };
            let cond = m.cross_attention(&mut tape, &store, &b, tokens, lat)?;
            let (mut latents, mut token_rows) = (Vec::new(), Vec::new());
            for &layer in &cond.layers {
                let t = tape.value(layer);
                for &r in cond.layout.latent_rows.iter().flatten() {
                    latents.extend_from_slice(t.row(r));
                }
                for &r in &cond.layout.token_rows {
                    token_rows.extend_from_slice(t.row(r));
                }
            }
            Ok((latents, token_rows))
        };
        let (clean_lat, clean_tok) = run(false)?;
        let (noisy_lat, noisy_tok) = run(true)?;
        out.compared += clean_lat.len();
        for (a, b) in clean_lat.iter().zip(&noisy_lat) {
            out.max_latent_diff = out.max_latent_diff.max((a - b).abs());
        }
        let tok_diff = clean_tok.iter().zip(&noisy_tok).fold(0.0, |acc: f64, (a, b)| acc.max((a - b).abs()));
        out.min_token_diff = out.min_token_diff.min(tok_diff);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MaskStats {
    pub long_tokens: usize,
    pub long_selected: usize,
    pub long_mask_replaced: usize,
    pub short_sequences: usize,
    pub short_selected_sequences: usize,
}

impl MaskStats {
    pub fn long_selection_rate(&self) -> f64 {
        self.long_selected as f64 / self.long_tokens as f64
    }

    /// Fraction of selected long-class tokens turned into `[MASK]`.
    pub fn mask_fraction(&self) -> f64 {
        self.long_mask_replaced as f64 / self.long_selected as f64
    }

    pub fn short_sequence_rate(&self) -> f64 {
        self.short_selected_sequences as f64 / self.short_sequences as f64
    }
}

/// Masks `long_tokens` long-class tokens (in sequences of 500) and
/// `short_sequences` three-token short-class sequences.
pub fn mask_statistics(long_tokens: usize, short_sequences: usize, seed: u64) -> MaskStats {
    const LONG_LEN: usize = 500;
    let content: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
    let vocab = Vocab::new(["product_sequence"], content).expect("distinct tokens");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let range = vocab.content_range();
    let seq_of = |len: usize, rng: &mut ChaCha8Rng| TokenSeq {
        ids: (0..len).map(|_| rng.random_range(range.clone())).collect(),
    };
    let mut st = MaskStats::default();
    let mut remaining = long_tokens;
    while remaining > 0 {
        let len = remaining.min(LONG_LEN);
        let seq = seq_of(len, &mut rng);
        let m = mask(&vocab, &seq, FieldClass::Long, &mut rng);
        st.long_tokens += len;
        st.long_selected += m.mask_positions.len();
        st.long_mask_replaced += m
            .mask_positions
            .iter()
            .filter(|&&p| m.input_ids[p] == vocab.mask_id())
            .count();
        remaining -= len;
    }
    for _ in 0..short_sequences {
        let seq = seq_of(3, &mut rng);
        let m = mask(&vocab, &seq, FieldClass::Short, &mut rng);
        st.short_sequences += 1;
        if !m.mask_positions.is_empty() {
            st.short_selected_sequences += 1;
        }
    }
    st
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleCheck {
    pub cases: usize,
    pub max_disagreement: f64,
    /// MAP of the ranks {1, 2, 4}.
    pub hand_case_map: f64,
}

/// Library metrics against brute-force oracles on random ranked sets.
pub fn metric_oracles(cases: usize, seed: u64) -> OracleCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random = oracle::random_cases(cases, &mut rng);
    let hand: Vec<RankedResult> = [1, 2, 4]
        .iter()
        .enumerate()
        .map(|(i, &r)| RankedResult::with_rank(format!("s{i}"), format!("q{i}"), Some(r)))
        .collect();
    OracleCheck {
        cases: random.len(),
        max_disagreement: oracle::max_disagreement(&random),
        hand_case_map: map_at_n(&hand, 10),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Degeneracy {
    /// Graph attention over a complete graph with zero edge biases against
    /// plain self-attention blocks.
    pub complete_graph_diff: f64,
    /// Logits of the model without GNN and conditioning against those of each
    /// item encoded on its own.
    pub ablated_logit_diff: f64,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc.max((x - y).abs()))
}

pub fn degeneracy(seed: u64) -> Result<Degeneracy, ModelError> {
    let s = toy_session();
    let vocab = Vocab::from_sessions([&s])?;

    let (m, mut store) = tiny_model(tiny_config(vocab.len()), seed)?;
    for &b in &m.edge_bias {
        store.value_mut(b).fill(0.0);
    }
    let mut b = Batch::from_sessions(&vocab, &[&s], 16)?;
    let n = b.sessions[0].items.len();
    b.sessions[0].relations = vec![vec![Some(Relation::SelfLoop); n]; n];
    let mut tape = Tape::new();
    let items = m.encode_items(&mut tape, &store, &b)?;
    let vh = m.pgnn(&mut tape, &store, &b, items.pooled)?;
    let table = tape.param(&store, m.item_pos);
    let pos = tape.gather_rows(table, &(0..n).collect::<Vec<_>>())?;
    let mut h = tape.add(items.pooled, pos)?;
    for blk in &m.gnn_blocks {
        h = blk.forward_masked(&mut tape, &store, h, &AttentionMask::full(n))?;
    }
    let complete_graph_diff = max_abs_diff(tape.value(vh).data(), tape.value(h).data());

    let cfg = CeresConfig {
        use_gnn: false,
        use_cond: false,
        ..tiny_config(vocab.len())
    };
    let (m, store) = tiny_model(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = Batch::from_sessions_masked(&vocab, &[&s], 16, &mut rng)?;
    let mut tape = Tape::new();
    let losses = m.pretrain_losses(&mut tape, &store, &b)?;
    let mut ablated_logit_diff = if losses.gmlm.is_some() { f64::INFINITY } else { 0.0 };
    let h = m.encode_items(&mut tape, &store, &b)?;
    let all = m.lm_logits(&mut tape, &store, h.tokens, Head::Intra)?;
    for item in &b.items {
        let mut solo = Batch::default();
        for seq in &b.seqs[item.seqs.clone()] {
            let r = seq.start..seq.start + seq.len;
            solo.seqs.push(SeqSpan {
                start: solo.input_ids.len(),
                len: seq.len,
                class: seq.class,
            });
            solo.input_ids.extend_from_slice(&b.input_ids[r.clone()]);
            solo.target_ids.extend_from_slice(&b.target_ids[r.clone()]);
            solo.positions.extend_from_slice(&b.positions[r]);
        }
        solo.items.push(ItemSpan {
            seqs: 0..solo.seqs.len(),
            tokens: 0..solo.input_ids.len(),
            item_pos: 0,
        });
        let mut t2 = Tape::new();
        let o = m.encode_items(&mut t2, &store, &solo)?;
        let l = m.lm_logits(&mut t2, &store, o.tokens, Head::Intra)?;
        for (i, row) in item.tokens.clone().enumerate() {
            ablated_logit_diff = ablated_logit_diff.max(max_abs_diff(tape.value(all).row(row), t2.value(l).row(i)));
        }
    }
    Ok(Degeneracy {
        complete_graph_diff,
        ablated_logit_diff,
    })
}
