use std::hint::black_box;

use ceres_core::corpus::{render, CorpusFormat};
use ceres_core::eval::{map_at_n, mapq_at_n, mrrq_at_n, RankedResult};
use ceres_core::model::{Batch, CeresConfig, CeresModel};
use ceres_core::nn::{normal_tensor, AttentionMask, ParamStore, Tape, TransformerBlock};
use ceres_core::synth::{generate, GenConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("tape_matmul_fwd_bwd");
    for n in [64, 256] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = normal_tensor::<f32, _>(n, n, 1.0, &mut rng);
        let b = normal_tensor::<f32, _>(n, n, 1.0, &mut rng);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut t = Tape::<f32>::new();
                let x = t.leaf(a.clone());
                let y = t.leaf(b.clone());
                let z = t.matmul(x, y).unwrap();
                let s = t.sum(z);
                black_box(t.backward(s).unwrap());
            })
        });
    }
    g.finish();
}

fn transformer_block(c: &mut Criterion) {
    let (rows, d) = (128, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f32>::new();
    let blk = TransformerBlock::new(&mut store, "blk", d, 4, &mut rng).unwrap();
    let x = normal_tensor::<f32, _>(rows, d, 1.0, &mut rng);
    let mask = AttentionMask::full(rows);
    c.bench_function("transformer_block_fwd_bwd_128x64", |bench| {
        bench.iter(|| {
            let mut t = Tape::<f32>::new();
            let h = t.leaf(x.clone());
            let y = blk.forward_masked(&mut t, &store, h, &mask).unwrap();
            let s = t.mean(y);
            black_box(t.backward(s).unwrap());
        })
    });
}

fn pretrain_loss(c: &mut Criterion) {
    let gen = GenConfig {
        num_sessions: 8,
        vocab_topics: 4,
        products_per_topic: 6,
        ..GenConfig::default()
    };
    let sessions = generate(&gen).unwrap();
    let vocab = gen.vocab().unwrap();
    let cfg = CeresConfig {
        d: 32,
        vocab_size: vocab.len(),
        ..CeresConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f32>::new();
    let model = CeresModel::new(cfg, &mut store, &mut rng).unwrap();
    let refs: Vec<_> = sessions.iter().take(4).collect();
    let batch = Batch::from_sessions_masked(&vocab, &refs, model.config.max_token_pos, &mut rng).unwrap();
    c.bench_function("pretrain_loss_fwd_bwd_4_sessions_d32", |bench| {
        bench.iter(|| {
            let mut t = Tape::<f32>::new();
            let l = model.pretrain_losses(&mut t, &store, &batch).unwrap();
            black_box(t.backward(l.total).unwrap());
        })
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let results: Vec<RankedResult> = (0..10_000)
        .map(|i| {
            let rank = rng.random_bool(0.8).then(|| rng.random_range(1..=100));
            RankedResult::with_rank(format!("s{i}"), format!("q{}", i % 700), rank)
        })
        .collect();
    let mut g = c.benchmark_group("metrics_10k");
    g.bench_function("map@64", |b| b.iter(|| black_box(map_at_n(&results, 64))));
    g.bench_function("mapq@64", |b| b.iter(|| black_box(mapq_at_n(&results, 64))));
    g.bench_function("mrrq@64", |b| b.iter(|| black_box(mrrq_at_n(&results, 64))));
    g.finish();
}

fn corpus(c: &mut Criterion) {
    let sessions = generate(&GenConfig {
        num_sessions: 500,
        ..GenConfig::default()
    })
    .unwrap();
    let mut g = c.benchmark_group("corpus_render_500");
    for format in CorpusFormat::ALL {
        g.bench_function(format.as_str(), |b| b.iter(|| black_box(render(&sessions, format))));
    }
    g.finish();
}

criterion_group!(benches, gemm, transformer_block, pretrain_loss, metrics, corpus);
criterion_main!(benches);
