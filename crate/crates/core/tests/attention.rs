mod common;

use common::{max_rel_diff, mha_oracle, mla_oracle};
use rand::RngExt;
use tinyseek::attention::*;
use tinyseek::tensor::{gradcheck, rng};
use tinyseek::{Bound, ParamStore, Tape, Tensor};

fn mla_setup(cfg: &AttentionConfig, seed: u64, std: f64) -> (ParamStore, MlaWeights) {
    let mut store = ParamStore::new();
    let w = MlaWeights::init(&mut store, "attn", cfg, seed, Init::normal(std)).unwrap();
    (store, w)
}

fn input(seed: u64, t: usize, d: usize) -> Tensor {
    rng::normal_tensor(seed, "input", &[t, d], 1.0)
}

fn train_rows(h: &Tensor, w: &MlaWeights, store: &ParamStore, cfg: &AttentionConfig) -> (Tensor, LatentLayerCache) {
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let (u, cache) = mla_forward_train(&tape.constant(h.clone()), w, &p, cfg).unwrap();
    ((*u.value()).clone(), cache)
}

fn small_cfg() -> AttentionConfig {
    AttentionConfig { d: 16, n_h: 2, d_h: 4, d_c: 8, d_c_q: 6, d_h_r: 2, layers: 1, ..Default::default() }
}

#[test]
fn mla_train_matches_straight_line_oracle() {
    let cfg = small_cfg();
    let (store, w) = mla_setup(&cfg, 3, 0.4);
    let h = input(4, 6, cfg.d);
    let (u, _) = train_rows(&h, &w, &store, &cfg);
    let want = mla_oracle(&h, &w, &store, &cfg);
    for (t, row) in want.iter().enumerate() {
        for (a, b) in u.row(t).iter().zip(row) {
            assert!((a - b).abs() < 1e-10, "row {t}: {a} vs {b}");
        }
    }
}

#[test]
fn mha_matches_loop_oracle() {
    for mha_rope in [false, true] {
        let cfg = AttentionConfig { d: 8, n_h: 2, d_h: 4, mha_rope, ..small_cfg() };
        let mut store = ParamStore::new();
        let w = MhaWeights::init(&mut store, "mha", &cfg, 9, Init::normal(0.5)).unwrap();
        let h = input(1, 4, cfg.d);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let u = mha_forward(&tape.constant(h.clone()), &w, &p, &cfg).unwrap().value();
        let want = mha_oracle(&h, &w, &store, &cfg);
        for (t, row) in want.iter().enumerate() {
            for (a, b) in u.row(t).iter().zip(row) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        let mut cache = KvLayerCache::new(cfg.inner());
        for (t, row) in want.iter().enumerate() {
            let got = mha_forward_infer(h.row(t), &w, &store, &cfg, &mut cache).unwrap();
            assert!(max_rel_diff(&got, row) < 1e-10);
        }
        assert_eq!(cache.stored_scalars(), 4 * 2 * cfg.n_h * cfg.d_h);
    }
}

#[test]
fn mha_single_token_and_identical_tokens() {
    let cfg = AttentionConfig { d: 8, n_h: 2, d_h: 4, ..small_cfg() };
    let mut store = ParamStore::new();
    let w = MhaWeights::init(&mut store, "mha", &cfg, 2, Init::normal(0.5)).unwrap();
    let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.3).sin()).collect();
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let one = Tensor::matrix(1, 8, x.clone()).unwrap();
    let u = mha_forward(&tape.constant(one), &w, &p, &cfg).unwrap().value();
    let v = store.get(w.w_v).matvec(&x).unwrap();
    let want = store.get(w.w_o).matvec(&v).unwrap();
    assert!(max_rel_diff(u.row(0), &want) < 1e-12);

    let cfg = AttentionConfig { mha_rope: false, ..cfg };
    let same = Tensor::from_rows(&[&x, &x, &x, &x]).unwrap();
    let u = mha_forward(&tape.constant(same), &w, &p, &cfg).unwrap().value();
    for t in 1..4 {
        assert!(max_rel_diff(u.row(t), u.row(0)) < 1e-12);
    }
}

#[test]
fn empty_sequence_gives_empty_output() {
    let cfg = small_cfg();
    let (store, w) = mla_setup(&cfg, 1, 0.1);
    let (u, cache) = train_rows(&Tensor::zeros(&[0, cfg.d]), &w, &store, &cfg);
    assert_eq!(u.shape(), &[0, cfg.d]);
    assert!(cache.is_empty());
}

#[test]
fn shape_mismatch_is_dimension_error() {
    let cfg = small_cfg();
    let (store, w) = mla_setup(&cfg, 1, 0.1);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let bad = tape.constant(Tensor::zeros(&[3, cfg.d + 1]));
    assert!(matches!(mla_forward_train(&bad, &w, &p, &cfg), Err(tinyseek::Error::Dimension(_))));
}

#[test]
fn train_infer_equivalence_and_cache_growth() {
    let cfg = small_cfg();
    let (store, w) = mla_setup(&cfg, 11, 0.4);
    let h = input(12, 8, cfg.d);
    let (u, train_cache) = train_rows(&h, &w, &store, &cfg);
    assert_eq!(train_cache.stored_scalars(), 8 * (cfg.d_c + cfg.d_h_r));
    let mut cache = LatentLayerCache::new(cfg.d_c, cfg.d_h_r);
    for t in 0..8 {
        let got = mla_forward_infer(h.row(t), &w, &store, &cfg, &mut cache).unwrap();
        assert!(max_rel_diff(&got, u.row(t)) < 1e-9);
        assert_eq!(cache.stored_scalars(), (t + 1) * cache.scalars_per_token());
    }
}

#[test]
fn single_token_infer_equals_train() {
    let cfg = small_cfg();
    let (store, w) = mla_setup(&cfg, 5, 0.4);
    let h = input(6, 1, cfg.d);
    let (u, _) = train_rows(&h, &w, &store, &cfg);
    let mut cache = LatentLayerCache::new(cfg.d_c, cfg.d_h_r);
    let got = mla_forward_infer(h.row(0), &w, &store, &cfg, &mut cache).unwrap();
    assert!(max_rel_diff(&got, u.row(0)) < 1e-13);
}

#[test]
fn infer_reads_scale_with_latent_width() {
    let cfg = small_cfg();
    let (store, w) = mla_setup(&cfg, 5, 0.4);
    let h = input(6, 10, cfg.d);
    let mut cache = LatentLayerCache::new(cfg.d_c, cfg.d_h_r);
    for t in 0..10 {
        cache.reset_reads();
        mla_forward_infer(h.row(t), &w, &store, &cfg, &mut cache).unwrap();
        let n = (t + 1) as u64;
        // Per head: one latent read for the logit, one for the weighted sum,
        // and one rotary key read.
        let per_head = n * (2 * cfg.d_c + cfg.d_h_r) as u64;
        assert_eq!(cache.reads(), cfg.n_h as u64 * per_head);
        assert!(cache.reads() < cfg.n_h as u64 * n * 3 * (cfg.d_c + cfg.d_h_r) as u64);
    }
}

#[test]
fn degenerate_decoupling_is_compressed_attention() {
    let cfg = AttentionConfig { d_h_r: 0, ..small_cfg() };
    let (store, w) = mla_setup(&cfg, 8, 0.4);
    assert_eq!(store.get(w.w_kr).numel(), 0);
    let h = input(2, 5, cfg.d);
    let (u, cache) = train_rows(&h, &w, &store, &cfg);
    assert_eq!(cache.scalars_per_token(), cfg.d_c);
    let want = mla_oracle(&h, &w, &store, &cfg);
    for (t, row) in want.iter().enumerate() {
        assert!(max_rel_diff(u.row(t), row) < 1e-10);
    }
    let mut inf = LatentLayerCache::new(cfg.d_c, 0);
    for t in 0..5 {
        let got = mla_forward_infer(h.row(t), &w, &store, &cfg, &mut inf).unwrap();
        assert!(max_rel_diff(&got, u.row(t)) < 1e-9);
    }
}

#[test]
fn causality() {
    let cfg = small_cfg();
    let (store, w) = mla_setup(&cfg, 21, 0.4);
    let h = input(22, 7, cfg.d);
    let (u, _) = train_rows(&h, &w, &store, &cfg);
    for p in 1..7 {
        let mut h2 = h.clone();
        for c in 0..cfg.d {
            h2.data_mut()[p * cfg.d + c] += 1.0 + c as f64;
        }
        let (u2, _) = train_rows(&h2, &w, &store, &cfg);
        for t in 0..p {
            assert_eq!(u.row(t), u2.row(t));
        }
        assert_ne!(u.row(p), u2.row(p));
    }
}

#[test]
fn batched_sequences_match_individual_runs() {
    let cfg = small_cfg();
    let (store, w) = mla_setup(&cfg, 31, 0.4);
    let h = input(32, 12, cfg.d);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let both = mla_forward_seqs(&tape.constant(h.clone()), &w, &p, &cfg, 6).unwrap().value();
    for b in 0..2 {
        let part = Tensor::new(&[6, cfg.d], h.data()[b * 6 * cfg.d..(b + 1) * 6 * cfg.d].to_vec()).unwrap();
        let (u, _) = train_rows(&part, &w, &store, &cfg);
        for t in 0..6 {
            assert!(max_rel_diff(both.row(b * 6 + t), u.row(t)) < 1e-13);
        }
    }
}

#[test]
fn mla_gradients_match_finite_differences() {
    let cfg = small_cfg();
    for seed in 0..3 {
        let (store, w) = mla_setup(&cfg, seed, 0.4);
        let h = input(seed + 100, 4, cfg.d);
        let mut inputs: Vec<Tensor> = store.iter().map(|(_, _, t)| t.clone()).collect();
        inputs.push(h);
        let report = gradcheck::check(&inputs, 1e-5, |tape, vars| {
            let p = Bound::from_vars(vars[..vars.len() - 1].to_vec());
            let (u, _) = mla_forward_train(&vars[vars.len() - 1], &w, &p, &cfg)?;
            gradcheck::weighted_sum(tape, &u, seed)
        })
        .unwrap();
        assert!(report.worst() < 1e-4, "seed {seed}: {:?}", report.max_rel_err);
    }
}

#[test]
fn rope_relative_position_on_rotary_path() {
    let mut r = rng::stream(7, "rope-prop");
    for _ in 0..10 {
        let q = rng::randn(&mut r, &[8]);
        let k = rng::randn(&mut r, &[8]);
        let i = r.random_range(0..50usize);
        let j = r.random_range(0..50usize);
        let base = |a, b| {
            let x = rope_apply(&q, a, 10_000.0).unwrap();
            let y = rope_apply(&k, b, 10_000.0).unwrap();
            x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum::<f64>()
        };
        for s in [1, 5, 17] {
            assert!((base(i, j) - base(i + s, j + s)).abs() < 1e-10);
        }
    }
}

#[test]
fn stack_cache_accounting_matches_closed_form() {
    let cfg = AttentionConfig::default();
    let mut stack = LatentKVCache::default();
    for _ in 0..cfg.layers {
        stack.layers.push(LayerCache::Latent(LatentLayerCache::new(cfg.d_c, cfg.d_h_r)));
    }
    for t in 1..=5 {
        for l in &mut stack.layers {
            if let LayerCache::Latent(c) = l {
                c.push(&vec![0.0; cfg.d_c], &vec![0.0; cfg.d_h_r]);
            }
        }
        assert_eq!(stack.len(), t);
        assert_eq!(stack.stored_scalars(), t * kv_cache_size(&cfg, AttentionVariant::Mla));
    }
    let mut kv = LatentKVCache::default();
    for _ in 0..cfg.layers {
        kv.layers.push(LayerCache::Kv(KvLayerCache::new(cfg.inner())));
    }
    for l in &mut kv.layers {
        if let LayerCache::Kv(c) = l {
            c.push(&vec![0.0; cfg.inner()], &vec![0.0; cfg.inner()]);
        }
    }
    assert_eq!(kv.stored_scalars(), kv_cache_size(&cfg, AttentionVariant::Mha));
}
