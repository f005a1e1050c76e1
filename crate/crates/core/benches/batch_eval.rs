//! Sequential against Rayon batch evaluation: latent extraction and one
//! training epoch on a small Hénon dataset.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use infodpcca::data::{generate_henon, HenonParams};
use infodpcca::models::{extract_latents_with, train_full, ExtractStage, ModelSpec, TrainConfig};
use infodpcca::par::Parallelism;

fn batch_eval(c: &mut Criterion) {
    let data = generate_henon(&HenonParams { n_seq: 64, t_len: 50, dx: 30, dy: 30, ..HenonParams::default() }).unwrap();
    let spec = ModelSpec { dx: 30, dy: 30, rnn_hidden: 32, mlp_hidden: vec![32, 32], ..ModelSpec::default() };
    let cfg = |parallelism| TrainConfig { max_epochs: 1, batch_size: 32, parallelism, ..TrainConfig::default() };
    let ckpt = train_full(&spec, &data, &cfg(Parallelism::Sequential)).unwrap();

    let mut group = c.benchmark_group("batch_eval");
    group.sample_size(10);
    for par in [Parallelism::Sequential, Parallelism::Rayon] {
        let name = format!("{par:?}").to_lowercase();
        group.bench_with_input(BenchmarkId::new("extract", &name), &par, |b, &par| {
            b.iter(|| extract_latents_with(&ckpt, black_box(&data), ExtractStage::Step2Posterior, par).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("train_epoch", &name), &par, |b, &par| {
            b.iter(|| train_full(&spec, black_box(&data), &cfg(par)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch_eval);
criterion_main!(benches);
