//! Sequential vs. pooled fan-out of per-sample test-time tuning.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vict::corruptions::{self, CorruptionKind, CorruptionSpec};
use vict::model::{self, ModelConfig};
use vict::parallel::{default_threads, map_indexed, map_sequential};
use vict::tasks::{self, TaskKind};
use vict::vict::{adapt_and_predict, select_prompt, Setting, VictConfig};

fn fanout(c: &mut Criterion) {
    let cfg = ModelConfig {
        cell_size: 16,
        patch_size: 4,
        embed_dim: 32,
        encoder_depth: 2,
        decoder_depth: 1,
        num_heads: 4,
        mlp_ratio: 4,
    };
    let params = model::init::<f32>(&cfg, 0).unwrap();
    let vict = VictConfig {
        steps: 3,
        setting: Setting::OneShot,
        ..VictConfig::default()
    };
    let samples: Vec<u64> = (0..16).collect();
    let job = |_: usize, &seed: &u64| {
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 3, seed).unwrap();
        let x_t = corruptions::apply(&tasks::generate(TaskKind::Denoise, seed, cfg.cell_size).input, &spec).unwrap();
        let prompt = select_prompt(TaskKind::Denoise, Setting::OneShot, Some(&spec), seed + 100, cfg.cell_size).unwrap();
        adapt_and_predict(&params, &prompt, &x_t, &vict).unwrap().loss_trace
    };

    let mut group = c.benchmark_group("vict_fanout_16_samples");
    group.sample_size(10);
    group.bench_function("sequential", |b| b.iter(|| map_sequential(&samples, job)));
    let threads = default_threads();
    group.bench_with_input(BenchmarkId::new("pool", threads), &threads, |b, &t| {
        b.iter(|| map_indexed(&samples, t, job))
    });
    group.finish();
}

criterion_group!(benches, fanout);
criterion_main!(benches);
