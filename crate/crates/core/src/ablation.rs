//! The ablation study: full CERES against CERES without conditioning at
//! finetune time, without the GNN at pretrain time, and an item-encoder-only
//! model finetuned from scratch, all on one synthetic corpus per seed.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::Vocab;
use crate::eval::{run_task, Task};
use crate::model::{CeresConfig, CeresModel};
use crate::nn::ParamStore;
use crate::session::{build_task_dataset, SessionGraph, SplitRatios};
use crate::synth::{generate, GenConfig};
use crate::train::{finetune, pretrain, FinetuneConfig, PretrainConfig, PretrainRecord, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Ceres,
    WithoutCond,
    WithoutGnn,
    /// Item encoder only, no pretraining.
    NoPretrain,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Ceres, Arm::WithoutCond, Arm::WithoutGnn, Arm::NoPretrain];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Ceres => "ceres",
            Arm::WithoutCond => "without_cond",
            Arm::WithoutGnn => "without_gnn",
            Arm::NoPretrain => "no_pretrain",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub pretrain_sessions: usize,
    pub finetune_sessions: usize,
    /// Generator settings shared by both corpora; count and seeds are set
    /// per run.
    pub generator: GenConfig,
    /// Architecture; `vocab_size`, `use_gnn` and `use_cond` are set per arm.
    pub model: CeresConfig,
    pub pretrain: PretrainConfig,
    pub finetune_epochs: usize,
    pub lr_grid: Vec<f64>,
    pub finetune_batch: usize,
    pub tasks: Vec<Task>,
    pub arms: Vec<Arm>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            pretrain_sessions: 20_000,
            finetune_sessions: 2_000,
            generator: GenConfig {
                noise_rate: 0.3,
                ..GenConfig::default()
            },
            model: CeresConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune_epochs: 10,
            lr_grid: crate::train::DEFAULT_LR_GRID.to_vec(),
            finetune_batch: 8,
            tasks: vec![Task::ProductSearch, Task::QuerySearch],
            arms: Arm::ALL.to_vec(),
        }
    }
}

impl AblationConfig {
    /// Laptop-scale setting: a small catalog, `d = 32`, 1000 pretraining
    /// steps and a single finetuning learning rate.
    pub fn desk() -> Self {
        let base = Self::default();
        Self {
            generator: GenConfig {
                vocab_topics: 8,
                products_per_topic: 8,
                ..base.generator
            },
            model: CeresConfig {
                d: 32,
                ..CeresConfig::default()
            },
            pretrain: PretrainConfig {
                steps: 1000,
                peak_lr: 1e-3,
                floor_lr: 1e-4,
                ..PretrainConfig::default()
            },
            finetune_epochs: 3,
            lr_grid: vec![1e-3],
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub arm: Arm,
    pub task: Task,
    pub test_map_at_1: f64,
    pub val_map_at_1: f64,
    pub best_lr: f64,
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub results: Vec<ArmResult>,
    pub pretrain_time: Duration,
    pub finetune_time: Duration,
}

impl SeedResult {
    pub fn map_at_1(&self, arm: Arm, task: Task) -> Option<f64> {
        self.results
            .iter()
            .find(|r| r.arm == arm && r.task == task)
            .map(|r| r.test_map_at_1)
    }
}

/// Pretraining and finetuning corpora over one shared catalog.
pub fn corpora(cfg: &AblationConfig, seed: u64) -> Result<(Vocab, Vec<SessionGraph>, Vec<SessionGraph>), TrainError> {
    let gen = |n, s| GenConfig {
        num_sessions: n,
        seed: s,
        catalog_seed: seed,
        ..cfg.generator.clone()
    };
    let bad = |e: crate::synth::SynthError| TrainError::Config(e.to_string());
    let pre = generate(&gen(cfg.pretrain_sessions, 2 * seed)).map_err(bad)?;
    let fine_cfg = gen(cfg.finetune_sessions, 2 * seed + 1);
    let fine = generate(&fine_cfg).map_err(bad)?;
    let vocab = fine_cfg
        .vocab()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    Ok((vocab, pre, fine))
}

fn log_progress(r: &PretrainRecord) {
    if r.step % 100 == 0 {
        log::info!(
            "pretrain step {}: lr {:.2e} intra {:.4} gmlm {:.4}",
            r.step,
            r.lr,
            r.loss_intra,
            r.loss_gmlm.unwrap_or(f64::NAN)
        );
    }
}

fn fresh(cfg: &CeresConfig, seed: u64) -> Result<(CeresModel, ParamStore<f32>), TrainError> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = CeresModel::new(cfg.clone(), &mut store, &mut rng)?;
    Ok((model, store))
}

/// Runs every configured arm and task for one seed.
pub fn run_seed(cfg: &AblationConfig, seed: u64) -> Result<SeedResult, TrainError> {
    let (vocab, pre, fine) = corpora(cfg, seed)?;
    let base = CeresConfig {
        vocab_size: vocab.len(),
        use_gnn: true,
        use_cond: true,
        ..cfg.model.clone()
    };
    let pcfg = PretrainConfig {
        seed,
        ..cfg.pretrain.clone()
    };

    let t = Instant::now();
    let needs = |a: Arm| cfg.arms.contains(&a);
    let full = if needs(Arm::Ceres) || needs(Arm::WithoutCond) {
        let (model, mut store) = fresh(&base, seed)?;
        pretrain(&model, &mut store, &vocab, &pre, &pcfg, &mut log_progress)?;
        Some((model, store))
    } else {
        None
    };
    let no_gnn = if needs(Arm::WithoutGnn) {
        let c = CeresConfig {
            use_gnn: false,
            ..base.clone()
        };
        let (model, mut store) = fresh(&c, seed)?;
        pretrain(&model, &mut store, &vocab, &pre, &pcfg, &mut log_progress)?;
        Some((model, store))
    } else {
        None
    };
    let scratch = fresh(&base, seed)?;
    let pretrain_time = t.elapsed();

    let t = Instant::now();
    let mut results = Vec::new();
    for &task in &cfg.tasks {
        let splits = build_task_dataset(&fine, task.variant(), SplitRatios::default(), seed)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        for &arm in &cfg.arms {
            let ((model, store), use_cond) = match arm {
                Arm::Ceres => (full.as_ref().expect("pretrained"), true),
                Arm::WithoutCond => (full.as_ref().expect("pretrained"), false),
                Arm::WithoutGnn => (no_gnn.as_ref().expect("pretrained"), true),
                Arm::NoPretrain => (&scratch, false),
            };
            let fcfg = FinetuneConfig {
                epochs: cfg.finetune_epochs,
                lr_grid: cfg.lr_grid.clone(),
                batch_size: cfg.finetune_batch,
                use_cond,
                seed,
                ..FinetuneConfig::new(task)
            };
            let out = finetune(model, store, &vocab, &splits.train, &splits.val, &fcfg)?;
            let bound = out.retriever.bind(&out.store, &vocab);
            let report = run_task(task, &splits.test, &bound, &[1])?;
            let r = ArmResult {
                arm,
                task,
                test_map_at_1: report.value("map", 1).unwrap_or(0.0),
                val_map_at_1: out.best_run().best_val(),
                best_lr: out.best_run().lr,
            };
            log::info!(
                "seed {seed} {task} {}: test map@1 {:.4} (val {:.4}, lr {:e})",
                arm.as_str(),
                r.test_map_at_1,
                r.val_map_at_1,
                r.best_lr
            );
            results.push(r);
        }
    }
    Ok(SeedResult {
        seed,
        results,
        pretrain_time,
        finetune_time: t.elapsed(),
    })
}

/// How often `better` beat (or, with `strict = false`, matched) `worse` on one
/// task across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderingCheck {
    pub task: Task,
    pub better: Arm,
    pub worse: Arm,
    pub strict: bool,
    pub wins: usize,
    pub seeds: usize,
}

impl OrderingCheck {
    pub fn holds_on(&self, min_wins: usize) -> bool {
        self.wins >= min_wins
    }
}

/// CERES against each ablation, per task: strictly better than the
/// conditioning-free and no-pretraining arms, at least as good as the
/// GNN-free arm.
pub fn ordering_checks(results: &[SeedResult], tasks: &[Task]) -> Vec<OrderingCheck> {
    let pairs = [
        (Arm::WithoutCond, true),
        (Arm::NoPretrain, true),
        (Arm::WithoutGnn, false),
    ];
    let mut out = Vec::new();
    for &task in tasks {
        for (worse, strict) in pairs {
            let mut wins = 0;
            let mut seeds = 0;
            for r in results {
                let (Some(a), Some(b)) = (r.map_at_1(Arm::Ceres, task), r.map_at_1(worse, task)) else {
                    continue;
                };
                seeds += 1;
                if a > b || (!strict && a == b) {
                    wins += 1;
                }
            }
            out.push(OrderingCheck {
                task,
                better: Arm::Ceres,
                worse,
                strict,
                wins,
                seeds,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed(seed: u64, ceres: f64, cond: f64, scratch: f64, gnn: f64) -> SeedResult {
        let r = |arm, v| ArmResult {
            arm,
            task: Task::ProductSearch,
            test_map_at_1: v,
            val_map_at_1: v,
            best_lr: 1e-3,
        };
        SeedResult {
            seed,
            results: vec![
                r(Arm::Ceres, ceres),
                r(Arm::WithoutCond, cond),
                r(Arm::NoPretrain, scratch),
                r(Arm::WithoutGnn, gnn),
            ],
            pretrain_time: Duration::ZERO,
            finetune_time: Duration::ZERO,
        }
    }

    #[test]
    fn ordering_counts_strict_and_weak_wins() {
        let results = [seed(0, 0.5, 0.4, 0.5, 0.5), seed(1, 0.3, 0.3, 0.1, 0.4)];
        let checks = ordering_checks(&results, &[Task::ProductSearch, Task::QuerySearch]);
        let wins: Vec<(Arm, usize, usize)> = checks.iter().map(|c| (c.worse, c.wins, c.seeds)).collect();
        assert_eq!(
            wins,
            vec![
                (Arm::WithoutCond, 1, 2),
                (Arm::NoPretrain, 1, 2),
                (Arm::WithoutGnn, 1, 2),
                (Arm::WithoutCond, 0, 0),
                (Arm::NoPretrain, 0, 0),
                (Arm::WithoutGnn, 0, 0),
            ]
        );
    }
}
