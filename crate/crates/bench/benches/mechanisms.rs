use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use tinyseek::attention::{mha_forward, mla_forward_infer, mla_forward_train, Init, LatentLayerCache, MhaWeights};
use tinyseek::grpo::{grpo_objective, outcome_advantages, FlatRollouts};
use tinyseek::moe::{moe_forward, MoeLayerConfig, MoeWeights};
use tinyseek::tensor::rng;
use tinyseek::{AttentionConfig, MlaWeights, ParamStore, Tape};

const T: usize = 64;

fn attention(c: &mut Criterion) {
    let cfg = AttentionConfig::default();
    let mut store = ParamStore::new();
    let mla = MlaWeights::init(&mut store, "mla", &cfg, 0, Init::normal(0.1)).unwrap();
    let mha = MhaWeights::init(&mut store, "mha", &cfg, 0, Init::normal(0.1)).unwrap();
    let h = rng::normal_tensor(1, "bench.h", &[T, cfg.d], 1.0);

    c.bench_function("mla_train_forward_backward_t64", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let (u, _) = mla_forward_train(&tape.constant(h.clone()), &mla, &p, &cfg).unwrap();
            u.sum().backward().unwrap();
        })
    });
    c.bench_function("mha_train_forward_backward_t64", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let p = store.bind(&tape);
            mha_forward(&tape.constant(h.clone()), &mha, &p, &cfg).unwrap().sum().backward().unwrap();
        })
    });
    c.bench_function("mla_infer_absorbed_t64", |b| {
        b.iter(|| {
            let mut cache = LatentLayerCache::new(cfg.d_c, cfg.d_h_r);
            for t in 0..T {
                black_box(mla_forward_infer(h.row(t), &mla, &store, &cfg, &mut cache).unwrap());
            }
        })
    });
}

fn moe(c: &mut Criterion) {
    let cfg = MoeLayerConfig { n: 8, m: 4, k: 2, k_s: 1, ..Default::default() };
    let mut store = ParamStore::new();
    let w = MoeWeights::init(&mut store, "moe", &cfg, 0, Init::normal(0.1)).unwrap();
    let u = rng::normal_tensor(1, "bench.u", &[T, cfg.d], 1.0);
    c.bench_function("moe_forward_backward_t64", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let (y, aux, _) = moe_forward(&tape.constant(u.clone()), &w, &p, &cfg).unwrap();
            y.sum().add(&aux).unwrap().backward().unwrap();
        })
    });
}

fn grpo(c: &mut Criterion) {
    let (g, len) = (8, 32);
    let mut r = rng::stream(0, "bench.grpo");
    let rewards: Vec<f64> = (0..g).map(|i| (i % 3) as f64).collect();
    let adv = outcome_advantages(&rewards, 1e-8).unwrap();
    let n = g * len;
    let logp = rng::randn(&mut r, &[n]).data().iter().map(|x| -1.0 - 0.1 * x.abs()).collect::<Vec<_>>();
    let roll = FlatRollouts {
        lens: vec![len; g],
        logp_old: logp.clone(),
        logp_ref: logp.iter().map(|x| x - 0.01).collect(),
        advantages: adv.iter().flat_map(|a| std::iter::repeat_n(*a, len)).collect(),
    };
    c.bench_function("grpo_objective_g8_len32", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let lp = tape.param(tinyseek::Tensor::vector(logp.clone()));
            let (obj, stats) = grpo_objective(&lp, &roll, 0.2, 0.04).unwrap();
            obj.backward().unwrap();
            black_box(stats);
        })
    });
}

criterion_group!(benches, attention, moe, grpo);
criterion_main!(benches);
