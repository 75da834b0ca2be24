use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::finetune::sample_negatives;
use super::*;
use crate::codec::Vocab;
use crate::eval::Task;
use crate::model::{CeresConfig, CeresModel};
use crate::nn::ParamStore;
use crate::session::{build_task_dataset, SessionGraph, SplitRatios};
use crate::synth::{generate, GenConfig};

fn tiny_gen(n: usize, seed: u64) -> GenConfig {
    GenConfig {
        num_sessions: n,
        vocab_topics: 6,
        products_per_topic: 8,
        filler_tokens: 40,
        desk_factor: 0.1,
        seed,
        ..GenConfig::default()
    }
}

fn tiny_model(vocab: &Vocab, use_cond: bool, seed: u64) -> (CeresModel, ParamStore<f32>) {
    let cfg = CeresConfig {
        d: 16,
        item_layers: 1,
        heads: 2,
        gat_layers: 1,
        cond_layers: 1,
        k_latent: 2,
        max_token_pos: 32,
        max_item_pos: 16,
        vocab_size: vocab.len(),
        use_gnn: true,
        use_cond,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = CeresModel::new(cfg, &mut store, &mut rng).unwrap();
    (model, store)
}

fn corpus(n: usize, seed: u64) -> (Vocab, Vec<SessionGraph>) {
    let g = tiny_gen(n, seed);
    (g.vocab().unwrap(), generate(&g).unwrap())
}

#[test]
fn repeated_session_overfits() {
    let (vocab, sessions) = corpus(4, 1);
    let (model, mut store) = tiny_model(&vocab, true, 2);
    let cfg = PretrainConfig {
        steps: 200,
        batch_size: 1,
        peak_lr: 3e-3,
        floor_lr: 3e-3,
        ..PretrainConfig::default()
    };
    let one = vec![sessions[0].clone()];
    let summary = pretrain(&model, &mut store, &vocab, &one, &cfg, &mut |_| {}).unwrap();
    let gmlm: Vec<f64> = summary.records.iter().map(|r| r.loss_gmlm.unwrap()).collect();
    let windows: Vec<f64> = gmlm
        .chunks(gmlm.len() / 4)
        .take(4)
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect();
    assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
}

#[test]
fn without_cond_the_total_is_the_intra_loss() {
    let (vocab, sessions) = corpus(8, 3);
    let (model, mut store) = tiny_model(&vocab, false, 4);
    let cfg = PretrainConfig {
        steps: 3,
        batch_size: 2,
        ..PretrainConfig::default()
    };
    let s = pretrain(&model, &mut store, &vocab, &sessions, &cfg, &mut |_| {}).unwrap();
    assert!(s.records.iter().all(|r| r.loss_gmlm.is_none() && r.loss_intra > 0.0));
}

#[test]
fn pretraining_replays_exactly() {
    let (vocab, sessions) = corpus(10, 5);
    let cfg = PretrainConfig {
        steps: 5,
        batch_size: 3,
        seed: 9,
        ..PretrainConfig::default()
    };
    let run = || {
        let (model, mut store) = tiny_model(&vocab, true, 6);
        let s = pretrain(&model, &mut store, &vocab, &sessions, &cfg, &mut |_| {}).unwrap();
        let bits: Vec<u32> = store.named().flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits())).collect();
        (s, bits)
    };
    let (a, wa) = run();
    let (b, wb) = run();
    assert_eq!(a, b);
    assert_eq!(wa, wb);
}

#[test]
fn unmasked_batch_is_skipped() {
    let (vocab, sessions) = corpus(20, 7);
    let mut single = sessions[0].clone();
    single.products.clear();
    single.edges.clear();
    single.purchase = None;
    single.queries.truncate(1);
    let (model, mut store) = tiny_model(&vocab, true, 8);
    let mut skipped = 0;
    for seed in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let before = store.step();
        match pretrain_step(&model, &mut store, &vocab, &[&single], 1e-3, &mut rng).unwrap() {
            StepOutcome::Skipped => {
                skipped += 1;
                assert_eq!(store.step(), before);
            }
            StepOutcome::Applied { masked_tokens, .. } => assert!(masked_tokens > 0),
        }
    }
    assert!(skipped > 0 && skipped < 40, "{skipped}");
}

#[test]
fn negatives_exclude_relevant() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let negs = sample_negatives(9, &[2, 5], 5, &mut rng);
        assert_eq!(negs.len(), 5);
        assert!(negs.iter().all(|n| *n != 2 && *n != 5 && *n < 9));
        let mut d = negs.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 5);
    }
    // Fewer candidates than requested: repeats are allowed.
    assert_eq!(sample_negatives(3, &[0], 5, &mut rng).len(), 5);
    assert!(sample_negatives(1, &[0], 5, &mut rng).is_empty());
}

#[test]
fn config_validation() {
    let mut c = FinetuneConfig::new(Task::ProductSearch);
    assert!(c.validate().is_ok());
    c.eps_neg = 0.95;
    assert!(c.validate().is_err());
    let p = PretrainConfig {
        steps: 0,
        ..PretrainConfig::default()
    };
    assert!(p.validate().is_err());
}

fn product_splits(n: usize, seed: u64) -> (Vocab, crate::session::TaskSplits) {
    let (vocab, sessions) = corpus(n, seed);
    let ratios = SplitRatios {
        train: 0.7,
        val: 0.15,
        test: 0.15,
    };
    let splits = build_task_dataset(&sessions, Task::ProductSearch.variant(), ratios, seed).unwrap();
    (vocab, splits)
}

#[test]
fn grid_runs_once_per_learning_rate() {
    let (vocab, splits) = product_splits(60, 11);
    let (model, store) = tiny_model(&vocab, true, 12);
    let cfg = FinetuneConfig {
        epochs: 1,
        ..FinetuneConfig::new(Task::ProductSearch)
    };
    let out = finetune(&model, &store, &vocab, &splits.train, &splits.val, &cfg).unwrap();
    assert_eq!(out.runs.len(), 4);
    let best = out.best_run().best_val();
    assert!(out.runs.iter().all(|r| r.best_val() <= best));
    assert!(out.store.id(SESSION_MAP).is_ok());
    assert_eq!(out.records().len(), 4 * 2);
}

#[test]
fn finetuning_improves_validation_map() {
    let (vocab, splits) = product_splits(300, 13);
    let (model, store) = tiny_model(&vocab, true, 14);
    let cfg = FinetuneConfig {
        epochs: 3,
        lr_grid: vec![2e-3],
        seed: 1,
        ..FinetuneConfig::new(Task::ProductSearch)
    };
    let out = finetune(&model, &store, &vocab, &splits.train, &splits.val, &cfg).unwrap();
    let run = out.best_run();
    assert!(run.best_val() > run.val_map_at_1[0], "{:?}", run.val_map_at_1);
    assert!(run.epoch_loss.last().unwrap() < &run.epoch_loss[0], "{:?}", run.epoch_loss);
}

#[test]
fn empty_training_set_rejected() {
    let (vocab, mut splits) = product_splits(40, 15);
    splits.train.examples.clear();
    let (model, store) = tiny_model(&vocab, true, 16);
    let cfg = FinetuneConfig::new(Task::ProductSearch);
    assert!(matches!(
        finetune(&model, &store, &vocab, &splits.train, &splits.val, &cfg),
        Err(TrainError::EmptyDataset(_))
    ));
}
