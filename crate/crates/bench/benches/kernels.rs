use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use palm_lab_core::jacobian::{closed_form_jacobian, sensitivity, Instance};
use palm_lab_core::math::init_uniform;
use palm_lab_core::models::{greedy_decode, loss_and_gradients, Pair};
use palm_lab_core::{
    attend, make_causal_mask, AttentionMode, AttentionWeights, Model, ModelConfig, NormKind, SeededRng, Variant, Vocab,
};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = SeededRng::new(1);
    for n in [16, 64, 256] {
        let a = init_uniform(n, n, 1.0, &mut rng);
        let b = init_uniform(n, n, 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("causal_attention");
    let mut rng = SeededRng::new(2);
    let d = 64;
    let w = AttentionWeights::random(d, &mut rng);
    for n in [16, 64] {
        let x = init_uniform(n, d, 1.0, &mut rng);
        let mask = make_causal_mask(n).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| attend(&x, &x, &x, &w, &mask).unwrap())
        });
    }
    group.finish();
}

fn jacobian(c: &mut Criterion) {
    let mut group = c.benchmark_group("jacobian_sensitivity");
    let mut rng = SeededRng::new(3);
    let inst = Instance::random(8, 8, 32, 1.0, &mut rng);
    for mode in [AttentionMode::EncoderAttention, AttentionMode::CrossUnidirectional, AttentionMode::Partial] {
        let q = inst.query(31, 3, mode).unwrap();
        group.bench_function(mode.name(), |bench| {
            bench.iter(|| sensitivity(&closed_form_jacobian(&q).unwrap(), NormKind::Spectral).unwrap())
        });
    }
    group.finish();
}

fn batch(rng: &mut SeededRng, vocab: usize, size: usize) -> Vec<Pair> {
    (0..size)
        .map(|_| {
            let s: Vec<u32> = (0..3 + rng.below(6)).map(|_| 3 + rng.below(vocab - 3) as u32).collect();
            let t: Vec<u32> = s.iter().rev().flat_map(|&x| [x, x]).collect();
            (s, t)
        })
        .collect()
}

fn training_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_and_gradients_d64_2layers_batch32");
    group.sample_size(20);
    let vocab = Vocab::new(20).unwrap();
    let mut rng = SeededRng::new(4);
    let pairs = batch(&mut rng, 20, 32);
    for v in [Variant::LM, Variant::PALM, Variant::ED] {
        let mut cfg = ModelConfig::new(v, 64, vocab).with_layers(2);
        cfg.heads = 4;
        let model = Model::new(cfg, 5).unwrap();
        group.bench_function(v.name(), |bench| {
            let mut drop_rng = SeededRng::new(6);
            bench.iter(|| loss_and_gradients(&model, &pairs, Some(&mut drop_rng)).unwrap())
        });
    }
    group.finish();
}

fn decoding(c: &mut Criterion) {
    let mut group = c.benchmark_group("greedy_decode_d64_2layers");
    let vocab = Vocab::new(20).unwrap();
    let source = vec![3, 9, 12, 5, 17, 8];
    for v in [Variant::LM, Variant::PALM] {
        let model = Model::new(ModelConfig::new(v, 64, vocab).with_layers(2), 7).unwrap();
        group.bench_function(v.name(), |bench| bench.iter(|| greedy_decode(&model, &source, 12).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, matmul, attention, jacobian, training_step, decoding);
criterion_main!(benches);
