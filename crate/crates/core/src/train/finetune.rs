//! Retrieval finetuning: two fresh linear maps on top of the session and
//! item embeddings, a squared hinge on cosine similarity with uniformly
//! sampled negatives, and a learning-rate grid selected by validation MAP@1.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::codec::Vocab;
use crate::eval::{map_at_n, rank_dataset, score_dataset, CandidatePool, Embedder, Task};
use crate::model::{Batch, CeresConfig, CeresModel, ItemText, ModelError};
use crate::nn::{
    lr_schedule, uniform_tensor, AdamConfig, ParamId, ParamStore, Real, Tape, Var,
    DEFAULT_FLOOR_LR, DEFAULT_WARMUP_FRAC,
};
use crate::session::{SessionGraph, TaskDataset};

use super::hinge::{hinge_loss_tape, DEFAULT_EPS_NEG, DEFAULT_EPS_POS};
use super::TrainError;

pub const SESSION_MAP: &str = "ft.session";
pub const ITEM_MAP: &str = "ft.item";
pub const DEFAULT_LR_GRID: [f64; 4] = [1e-4, 1e-5, 5e-5, 5e-6];

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub task: Task,
    pub epochs: usize,
    pub lr_grid: Vec<f64>,
    pub negatives: usize,
    pub eps_pos: f64,
    pub eps_neg: f64,
    /// Training examples per optimizer step.
    pub batch_size: usize,
    pub warmup_frac: f64,
    /// Session embeddings through the conditional transformer; `false` uses
    /// the item encoder alone.
    pub use_cond: bool,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            epochs: 10,
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            negatives: 5,
            eps_pos: DEFAULT_EPS_POS,
            eps_neg: DEFAULT_EPS_NEG,
            batch_size: 8,
            warmup_frac: DEFAULT_WARMUP_FRAC,
            use_cond: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(0.0 <= self.eps_neg && self.eps_neg < self.eps_pos && self.eps_pos <= 1.0) {
            return bad("need 0 <= eps_neg < eps_pos <= 1");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.negatives == 0 {
            return bad("epochs, batch_size and negatives must be positive");
        }
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|&lr| !(lr > 0.0)) {
            return bad("lr_grid must hold positive learning rates");
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1]");
        }
        Ok(())
    }
}

/// A CERES model with the two retrieval maps.
#[derive(Debug, Clone)]
pub struct Retriever {
    pub model: CeresModel,
    pub session_map: ParamId,
    pub item_map: ParamId,
    pub use_cond: bool,
}

impl Retriever {
    /// Registers freshly initialised `d x d` maps (no bias) in `store`.
    pub fn attach<F: Real, R: Rng + ?Sized>(
        model: CeresModel,
        store: &mut ParamStore<F>,
        use_cond: bool,
        rng: &mut R,
    ) -> Result<Self, TrainError> {
        let d = model.config.d;
        let bound = 1.0 / (d as f64).sqrt();
        let session_map = store.insert(SESSION_MAP, uniform_tensor(d, d, bound, rng))?;
        let item_map = store.insert(ITEM_MAP, uniform_tensor(d, d, bound, rng))?;
        Ok(Self {
            model,
            session_map,
            item_map,
            use_cond,
        })
    }

    /// Handles of maps already present in `store`.
    pub fn from_store<F: Real>(model: CeresModel, store: &ParamStore<F>, use_cond: bool) -> Result<Self, TrainError> {
        Ok(Self {
            model,
            session_map: store.id(SESSION_MAP)?,
            item_map: store.id(ITEM_MAP)?,
            use_cond,
        })
    }

    pub fn embed_sessions<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        vocab: &Vocab,
        sessions: &[&SessionGraph],
    ) -> Result<Var, ModelError> {
        let batch = Batch::from_sessions(vocab, sessions, self.model.config.max_token_pos)?;
        let e = self.model.embed_sessions(tape, store, &batch, self.use_cond)?;
        let w = tape.param(store, self.session_map);
        Ok(tape.matmul(e, w)?)
    }

    pub fn embed_items<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        vocab: &Vocab,
        items: &[ItemText<'_>],
    ) -> Result<Var, ModelError> {
        let batch = Batch::from_items(vocab, items, self.model.config.max_token_pos)?;
        let e = self.model.embed_items(tape, store, &batch)?;
        let w = tape.param(store, self.item_map);
        Ok(tape.matmul(e, w)?)
    }

    pub fn bind<'a, F: Real>(&'a self, store: &'a ParamStore<F>, vocab: &'a Vocab) -> BoundRetriever<'a, F> {
        BoundRetriever {
            retriever: self,
            store,
            vocab,
        }
    }
}

/// A retriever with its parameters, usable for evaluation.
pub struct BoundRetriever<'a, F: Real> {
    pub retriever: &'a Retriever,
    pub store: &'a ParamStore<F>,
    pub vocab: &'a Vocab,
}

fn rows<F: Real>(tape: &Tape<F>, v: Var) -> Vec<Vec<f64>> {
    let t = tape.value(v);
    (0..t.rows()).map(|r| t.row(r).iter().map(|x| x.as_f64()).collect()).collect()
}

impl<F: Real> Embedder for BoundRetriever<'_, F> {
    fn embed_sessions(&self, sessions: &[&SessionGraph]) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut tape = Tape::new();
        let v = self.retriever.embed_sessions(&mut tape, self.store, self.vocab, sessions)?;
        Ok(rows(&tape, v))
    }

    fn embed_candidates(&self, items: &[ItemText<'_>]) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut tape = Tape::new();
        let v = self.retriever.embed_items(&mut tape, self.store, self.vocab, items)?;
        Ok(rows(&tape, v))
    }
}

/// The model's own embeddings, without retrieval maps.
pub struct ModelEmbedder<'a, F: Real> {
    pub model: &'a CeresModel,
    pub store: &'a ParamStore<F>,
    pub vocab: &'a Vocab,
    pub use_cond: bool,
}

impl<F: Real> Embedder for ModelEmbedder<'_, F> {
    fn embed_sessions(&self, sessions: &[&SessionGraph]) -> Result<Vec<Vec<f64>>, ModelError> {
        let batch = Batch::from_sessions(self.vocab, sessions, self.model.config.max_token_pos)?;
        let mut tape = Tape::new();
        let v = self.model.embed_sessions(&mut tape, self.store, &batch, self.use_cond)?;
        Ok(rows(&tape, v))
    }

    fn embed_candidates(&self, items: &[ItemText<'_>]) -> Result<Vec<Vec<f64>>, ModelError> {
        let batch = Batch::from_items(self.vocab, items, self.model.config.max_token_pos)?;
        let mut tape = Tape::new();
        let v = self.model.embed_items(&mut tape, self.store, &batch)?;
        Ok(rows(&tape, v))
    }
}

/// Rebuilds a model (and its retrieval maps, when `source` has them) with
/// the values of `source`. Every parameter must match by name and shape.
pub fn restore<F: Real>(
    source: &ParamStore<F>,
    config: CeresConfig,
    use_cond: bool,
) -> Result<(CeresModel, ParamStore<F>, Option<Retriever>), TrainError> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = CeresModel::new(config, &mut store, &mut rng)?;
    let retriever = if source.id(SESSION_MAP).is_ok() {
        Some(Retriever::attach(model.clone(), &mut store, use_cond, &mut rng)?)
    } else {
        None
    };
    store.load_values(source, true)?;
    store.set_step(source.step());
    Ok((model, store, retriever))
}

/// MAP@1 of `data` against its own candidate pool.
pub fn validation_map_at_1(task: Task, data: &TaskDataset, embedder: &dyn Embedder) -> Result<f64, TrainError> {
    let pool = CandidatePool::build(task, data)?;
    let scores = score_dataset(&pool, data, embedder)?;
    let (results, _) = rank_dataset(&pool, data, &scores, 1);
    Ok(map_at_n(&results, 1))
}

/// One line of the finetuning log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneRecord {
    pub lr: f64,
    pub epoch: usize,
    /// Mean training loss of the epoch; absent for epoch 0.
    pub loss: Option<f64>,
    pub val_map_at_1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRun {
    pub lr: f64,
    /// Validation MAP@1 before training (index 0) and after each epoch.
    pub val_map_at_1: Vec<f64>,
    pub epoch_loss: Vec<f64>,
    /// Epoch (1-based) with the highest validation MAP@1.
    pub best_epoch: usize,
}

impl GridRun {
    pub fn best_val(&self) -> f64 {
        self.val_map_at_1[self.best_epoch]
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<F: Real> {
    pub retriever: Retriever,
    /// Parameters of the best epoch of the best run.
    pub store: ParamStore<F>,
    pub runs: Vec<GridRun>,
    /// Index of the winning run.
    pub best: usize,
}

impl<F: Real> FinetuneOutcome<F> {
    pub fn best_run(&self) -> &GridRun {
        &self.runs[self.best]
    }

    pub fn records(&self) -> Vec<FinetuneRecord> {
        let mut out = Vec::new();
        for r in &self.runs {
            for (epoch, &v) in r.val_map_at_1.iter().enumerate() {
                out.push(FinetuneRecord {
                    lr: r.lr,
                    epoch,
                    loss: epoch.checked_sub(1).map(|e| r.epoch_loss[e]),
                    val_map_at_1: v,
                });
            }
        }
        out
    }
}

struct Example<'a> {
    session: &'a SessionGraph,
    relevant: Vec<usize>,
}

/// Draws `k` negatives uniformly from the pool, excluding every relevant
/// index; distinct whenever the pool allows.
pub(super) fn sample_negatives<R: Rng + ?Sized>(pool_len: usize, relevant: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    let available = pool_len - relevant.len();
    if available == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let i = rng.random_range(0..pool_len);
        if relevant.contains(&i) || (out.len() < available && out.contains(&i)) {
            continue;
        }
        out.push(i);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn train_run<F: Real>(
    retriever: &Retriever,
    init: &ParamStore<F>,
    vocab: &Vocab,
    pool: &CandidatePool,
    examples: &[Example<'_>],
    val: &TaskDataset,
    cfg: &FinetuneConfig,
    lr: f64,
) -> Result<(GridRun, ParamStore<F>), TrainError> {
    let mut store = init.clone();
    store.set_step(0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total = (steps_per_epoch * cfg.epochs) as u64;
    let floor = DEFAULT_FLOOR_LR.min(lr);
    let mut val_map = vec![validation_map_at_1(cfg.task, val, &retriever.bind(&store, vocab))?];
    let mut best = (val_map[0], 0, store.clone());
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let draws: Vec<(usize, Vec<usize>)> = chunk
                .iter()
                .map(|&i| {
                    let ex = &examples[i];
                    let pos = *ex.relevant.choose(&mut rng).expect("examples have a relevant candidate");
                    (pos, sample_negatives(pool.len(), &ex.relevant, cfg.negatives, &mut rng))
                })
                .collect();
            let w = 1.0 / chunk.len() as f64;
            let shared = &store;
            let micros = chunk
                .par_iter()
                .zip(&draws)
                .map(|(&i, (pos, negs))| {
                    let mut tape = Tape::new();
                    let s = retriever.embed_sessions(&mut tape, shared, vocab, &[examples[i].session])?;
                    let texts: Vec<ItemText<'_>> = std::iter::once(pos)
                        .chain(negs)
                        .map(|&c| pool.get(c).text())
                        .collect();
                    let c = retriever.embed_items(&mut tape, shared, vocab, &texts)?;
                    let s = tape.l2_normalize_rows(s);
                    let c = tape.l2_normalize_rows(c);
                    let s = tape.gather_rows(s, &vec![0; texts.len()])?;
                    let sims = tape.row_dot(s, c)?;
                    let loss = hinge_loss_tape(&mut tape, sims, cfg.eps_pos, cfg.eps_neg)?;
                    let value = tape.value(loss).item().map_or(0.0, |x| x.as_f64());
                    let scaled = tape.scale(loss, F::lit(w));
                    let grads = tape.backward(scaled)?;
                    Ok((tape, grads, value))
                })
                .collect::<Result<Vec<_>, TrainError>>()?;
            store.clear_grads();
            for (tape, grads, value) in &micros {
                store.absorb(tape, grads);
                loss_sum += value;
            }
            let rate = lr_schedule(step, lr, cfg.warmup_frac, total, floor)?;
            store.adam_step(rate, AdamConfig::default())?;
        }
        epoch_loss.push(loss_sum / examples.len() as f64);
        let v = validation_map_at_1(cfg.task, val, &retriever.bind(&store, vocab))?;
        log::info!("lr {lr:e} epoch {epoch}: loss {:.5} val map@1 {v:.4}", epoch_loss[epoch - 1]);
        val_map.push(v);
        if epoch == 1 || v > best.0 {
            best = (v, epoch, store.clone());
        }
    }
    let run = GridRun {
        lr,
        val_map_at_1: val_map,
        epoch_loss,
        best_epoch: best.1,
    };
    Ok((run, best.2))
}

/// Attaches fresh retrieval maps to a copy of `store`, trains one run per
/// learning rate of the grid and returns the parameters with the highest
/// validation MAP@1 over all runs and epochs (ties keep the earlier one).
pub fn finetune<F: Real>(
    model: &CeresModel,
    store: &ParamStore<F>,
    vocab: &Vocab,
    train: &TaskDataset,
    val: &TaskDataset,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome<F>, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let mut init = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let retriever = Retriever::attach(model.clone(), &mut init, cfg.use_cond, &mut rng)?;
    let pool = CandidatePool::build(cfg.task, train)?;
    let examples: Vec<Example<'_>> = train
        .examples
        .iter()
        .filter_map(|e| {
            let relevant = pool.relevant(&e.label);
            (!relevant.is_empty()).then_some(Example {
                session: &e.session,
                relevant,
            })
        })
        .collect();
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    let runs = cfg
        .lr_grid
        .par_iter()
        .map(|&lr| train_run(&retriever, &init, vocab, &pool, &examples, val, cfg, lr))
        .collect::<Result<Vec<_>, _>>()?;
    let mut best = 0;
    for (i, (run, _)) in runs.iter().enumerate() {
        if run.best_val() > runs[best].0.best_val() {
            best = i;
        }
    }
    let (runs, mut stores): (Vec<GridRun>, Vec<ParamStore<F>>) = runs.into_iter().unzip();
    Ok(FinetuneOutcome {
        retriever,
        store: stores.swap_remove(best),
        runs,
        best,
    })
}
