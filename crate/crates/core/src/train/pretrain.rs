//! Joint masked-token pretraining over session graphs.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::codec::Vocab;
use crate::model::{Batch, CeresModel};
use crate::nn::{
    lr_schedule, AdamConfig, Gradients, ParamStore, Real, Tape, DEFAULT_FLOOR_LR, DEFAULT_PEAK_LR,
    DEFAULT_WARMUP_FRAC,
};
use crate::session::SessionGraph;

use super::TrainError;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: u64,
    /// Sessions per step.
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub floor_lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            peak_lr: DEFAULT_PEAK_LR,
            warmup_frac: DEFAULT_WARMUP_FRAC,
            floor_lr: DEFAULT_FLOOR_LR,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.peak_lr > 0.0) || self.floor_lr < 0.0 || self.floor_lr > self.peak_lr {
            return bad("need 0 <= floor_lr <= peak_lr and peak_lr > 0");
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One line of the pretraining log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainRecord {
    pub step: u64,
    pub lr: f64,
    pub loss_intra: f64,
    pub loss_gmlm: Option<f64>,
    pub masked_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Applied { loss_intra: f64, loss_gmlm: Option<f64>, masked_tokens: usize },
    /// No token of the batch was selected for masking.
    Skipped,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainSummary {
    pub records: Vec<PretrainRecord>,
    pub skipped: u64,
}

struct Micro<F: Real> {
    tape: Tape<F>,
    grads: Gradients<F>,
    intra: f64,
    gmlm: Option<f64>,
}

/// Masks every session of the batch, computes the intra-item and
/// graph-conditioned losses, backpropagates their sum and applies one Adam
/// step at `lr`.
///
/// Each session is its own micro-batch, weighted by its share of the masked
/// tokens, so the update equals that of one mean over all masked tokens and
/// does not depend on the number of worker threads.
pub fn pretrain_step<F: Real>(
    model: &CeresModel,
    store: &mut ParamStore<F>,
    vocab: &Vocab,
    sessions: &[&SessionGraph],
    lr: f64,
    rng: &mut dyn RngCore,
) -> Result<StepOutcome, TrainError> {
    let max_pos = model.config.max_token_pos;
    let batches = sessions
        .iter()
        .map(|s| Batch::from_sessions_masked(vocab, &[*s], max_pos, rng))
        .collect::<Result<Vec<_>, _>>()?;
    let total: usize = batches.iter().map(|b| b.masked.len()).sum();
    if total == 0 {
        return Ok(StepOutcome::Skipped);
    }
    let shared: &ParamStore<F> = store;
    let micros = batches
        .par_iter()
        .filter(|b| !b.masked.is_empty())
        .map(|b| {
            let w = b.masked.len() as f64 / total as f64;
            let mut tape = Tape::new();
            let losses = model.pretrain_losses(&mut tape, shared, b)?;
            let scaled = tape.scale(losses.total, F::lit(w));
            let grads = tape.backward(scaled)?;
            let val = |t: &Tape<F>, v| t.value(v).item().map_or(0.0, |x: F| x.as_f64()) * w;
            let intra = val(&tape, losses.intra);
            let gmlm = losses.gmlm.map(|g| val(&tape, g));
            Ok(Micro { tape, grads, intra, gmlm })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    store.clear_grads();
    let (mut intra, mut gmlm) = (0.0, None);
    for m in &micros {
        store.absorb(&m.tape, &m.grads);
        intra += m.intra;
        if let Some(g) = m.gmlm {
            *gmlm.get_or_insert(0.0) += g;
        }
    }
    store.adam_step(lr, AdamConfig::default())?;
    Ok(StepOutcome::Applied {
        loss_intra: intra,
        loss_gmlm: gmlm,
        masked_tokens: total,
    })
}

/// Runs `cfg.steps` pretraining steps over shuffled epochs of `sessions`,
/// calling `log` after every applied step.
pub fn pretrain<F: Real>(
    model: &CeresModel,
    store: &mut ParamStore<F>,
    vocab: &Vocab,
    sessions: &[SessionGraph],
    cfg: &PretrainConfig,
    log: &mut dyn FnMut(&PretrainRecord),
) -> Result<PretrainSummary, TrainError> {
    cfg.validate()?;
    if sessions.is_empty() {
        return Err(TrainError::EmptyDataset("pretraining"));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mask_rng.set_stream(1);
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    let mut cursor = order.len();
    let mut summary = PretrainSummary::default();
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(sessions.len()) {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(&sessions[order[cursor]]);
            cursor += 1;
        }
        let lr = lr_schedule(step, cfg.peak_lr, cfg.warmup_frac, cfg.steps, cfg.floor_lr)?;
        match pretrain_step(model, store, vocab, &batch, lr, &mut mask_rng)? {
            StepOutcome::Applied {
                loss_intra,
                loss_gmlm,
                masked_tokens,
            } => {
                let rec = PretrainRecord {
                    step,
                    lr,
                    loss_intra,
                    loss_gmlm,
                    masked_tokens,
                };
                log(&rec);
                summary.records.push(rec);
            }
            StepOutcome::Skipped => {
                log::debug!("step {step}: no masked tokens, skipped");
                summary.skipped += 1;
            }
        }
    }
    Ok(summary)
}
