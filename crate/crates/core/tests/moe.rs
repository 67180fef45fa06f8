#![allow(clippy::needless_range_loop)]

mod common;

use common::{dot, matvec, softmax};
use tinyseek::attention::Init;
use tinyseek::moe::sim::{run_skew, SkewSim};
use tinyseek::moe::*;
use tinyseek::optim::{Adam, AdamConfig};
use tinyseek::tensor::{gradcheck, rng};
use tinyseek::{Bound, Error, ParamStore, Precision, Tape, Tensor};

fn cfg(n: usize, m: usize, k: usize, k_s: usize) -> MoeLayerConfig {
    MoeLayerConfig { d: 6, n, m, k, k_s, ffn_inner: 8, ..Default::default() }
}

#[test]
fn route_examples() {
    let r = route_scores(&[0.5, 0.3, 0.2], &[0.0; 3], 1, RoutingMode::AuxLoss).unwrap();
    assert_eq!(r.selected, vec![0]);
    assert_eq!(r.gates, vec![0.5, 0.0, 0.0]);

    let r = route_scores(&[0.5, 0.3], &[-0.4, 0.0], 1, RoutingMode::LossFree).unwrap();
    assert_eq!(r.selected, vec![1]);
    assert_eq!(r.gates, vec![0.0, 0.3]);

    // 0.25 + 0.25 ties with 0.5 + 0.0; the lower index wins.
    let r = route_scores(&[0.25, 0.5, 0.25], &[0.25, 0.0, 0.0], 1, RoutingMode::LossFree).unwrap();
    assert_eq!(r.selected, vec![0]);
    let r = route_scores(&[0.2, 0.4, 0.4], &[0.0; 3], 2, RoutingMode::AuxLoss).unwrap();
    assert_eq!(r.selected, vec![1, 2]);

    assert!(matches!(route_scores(&[0.5, 0.5], &[0.0; 2], 3, RoutingMode::AuxLoss), Err(Error::Config(_))));
}

#[test]
fn gates_are_original_affinities_in_both_modes() {
    let c = MoeLayerConfig { d: 5, n: 3, m: 2, k: 2, k_s: 1, ffn_inner: 4, ..Default::default() };
    let centroids = rng::normal_tensor(1, "c", &[c.n_routed(), c.d], 1.0);
    let bias: Vec<f64> = (0..c.n_routed()).map(|i| 0.1 * i as f64 - 0.2).collect();
    let mut r = rng::stream(2, "u");
    for mode in [RoutingMode::AuxLoss, RoutingMode::LossFree] {
        let c = MoeLayerConfig { routing_mode: mode, ..c.clone() };
        for _ in 0..20 {
            let u = rng::randn(&mut r, &[c.d]);
            let out = route(u.data(), &centroids, &bias, &c).unwrap();
            let s = softmax(&matvec(&centroids, u.data()));
            assert_eq!(out.selected.len(), c.k_routed());
            for i in 0..c.n_routed() {
                if out.selected.contains(&i) {
                    assert!((out.gates[i] - s[i]).abs() < 1e-15);
                } else {
                    assert_eq!(out.gates[i], 0.0);
                }
            }
        }
    }
}

#[test]
fn config_counts_and_validation() {
    let c = cfg(4, 4, 2, 1);
    assert_eq!((c.total_experts(), c.n_routed(), c.k_routed()), (16, 15, 7));
    assert!(c.validate().is_ok());
    assert!(matches!(cfg(4, 3, 2, 0).validate(), Err(Error::Config(_))));
    assert!(matches!(cfg(4, 1, 1, 1).validate(), Err(Error::Config(_))));
    let bad_gamma = MoeLayerConfig { gamma: -1.0, ..cfg(4, 1, 2, 0) };
    assert!(bad_gamma.validate().is_err());
}

#[test]
fn segmentation_keeps_parameter_counts() {
    let configs = [cfg(4, 1, 2, 0), cfg(4, 4, 2, 0), cfg(4, 4, 2, 1)];
    for c in &configs {
        assert_eq!(c.total_expert_params(), configs[0].total_expert_params());
        assert_eq!(c.activated_expert_params(), configs[0].activated_expert_params());
        let mut store = ParamStore::new();
        let w = MoeWeights::init(&mut store, "moe", c, 0, Init::normal(0.1)).unwrap();
        let experts: usize = w
            .shared
            .iter()
            .chain(&w.routed)
            .map(|e| store.get(e.w1).numel() + store.get(e.w2).numel())
            .sum();
        assert_eq!(experts, c.total_expert_params());
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn expert_oracle(e: &ExpertWeights, store: &ParamStore, x: &[f64]) -> Vec<f64> {
    let a: Vec<f64> = matvec(store.get(e.w1), x).into_iter().map(silu).collect();
    matvec(store.get(e.w2), &a)
}

#[test]
fn conventional_moe_oracle() {
    let c = MoeLayerConfig { routing_mode: RoutingMode::AuxLoss, ..cfg(4, 1, 2, 0) };
    let mut store = ParamStore::new();
    let w = MoeWeights::init(&mut store, "moe", &c, 3, Init::normal(0.5)).unwrap();
    let u = rng::normal_tensor(4, "u", &[7, c.d], 1.0);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let (h, _, _) = moe_forward(&tape.constant(u.clone()), &w, &p, &c).unwrap();
    let h = h.value();
    for t in 0..7 {
        let x = u.row(t);
        let logits: Vec<f64> = (0..4).map(|i| dot(store.get(w.centroids).row(i), x)).collect();
        let s = softmax(&logits);
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|a, b| s[*b].partial_cmp(&s[*a]).unwrap());
        let mut want = x.to_vec();
        for &i in &order[..2] {
            for (o, y) in want.iter_mut().zip(expert_oracle(&w.routed[i], &store, x)) {
                *o += s[i] * y;
            }
        }
        for (a, b) in h.row(t).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        let (plain, _) = moe_branch_plain(x, &w, &store, &c).unwrap();
        for ((a, b), xi) in plain.iter().zip(&want).zip(x) {
            assert!((a + xi - b).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_routed_experts_leave_shared_plus_residual() {
    let c = cfg(4, 2, 1, 1);
    let mut store = ParamStore::new();
    let w = MoeWeights::init(&mut store, "moe", &c, 5, Init::normal(0.5)).unwrap();
    for e in &w.routed {
        *store.get_mut(e.w2) = Tensor::zeros(store.get(e.w2).shape());
    }
    let u = rng::normal_tensor(6, "u", &[5, c.d], 1.0);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let (h, _, _) = moe_forward(&tape.constant(u.clone()), &w, &p, &c).unwrap();
    let h = h.value();
    for t in 0..5 {
        let shared = expert_oracle(&w.shared[0], &store, u.row(t));
        for ((a, s), x) in h.row(t).iter().zip(&shared).zip(u.row(t)) {
            assert!((a - s - x).abs() < 1e-12);
        }
    }
}

#[test]
fn balance_loss_identities() {
    for (n, k, alpha) in [(8usize, 2usize, 0.01), (15, 7, 0.3), (4, 1, 1.0)] {
        let p_uniform = vec![k as f64 / n as f64; n];
        let uniform = balance_loss(&vec![1.0; n], &p_uniform, alpha).unwrap();
        assert!((uniform - alpha * k as f64).abs() < 1e-12);
        // All load on the first k experts: f = N/K there, 0 elsewhere.
        let mut skewed = vec![0.0; n];
        for f in skewed.iter_mut().take(k) {
            *f = n as f64 / k as f64;
        }
        assert!((skewed.iter().sum::<f64>() - n as f64).abs() < 1e-12);
        let witness = balance_loss(&skewed, &p_uniform, alpha).unwrap();
        assert!((witness - alpha * k as f64).abs() < 1e-12);
        assert_eq!(balance_loss(&skewed, &p_uniform, 0.0).unwrap(), 0.0);
    }
    assert!(matches!(LoadStats::new(3).load_fractions(1), Err(Error::Contract(_))));
}

#[test]
fn load_fractions_follow_definition() {
    let mut stats = LoadStats::new(4);
    for sel in [[0usize, 1], [0, 2], [0, 1]] {
        let mut gates = vec![0.0; 4];
        for &i in &sel {
            gates[i] = 0.25;
        }
        stats.record(&Routing { scores: vec![0.25; 4], selected: sel.to_vec(), gates });
    }
    // N′/(K′T) = 4/(2·3)
    let f = stats.load_fractions(2).unwrap();
    let want = [3.0, 2.0, 1.0, 0.0].map(|c| c * 4.0 / 6.0);
    for (a, b) in f.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(stats.mean_probs().unwrap(), vec![0.25; 4]);
}

#[test]
fn bias_update_examples() {
    let mut b = vec![0.3, -0.1, 0.2];
    bias_update(&mut b, &[5, 5, 5], 0.01).unwrap();
    assert_eq!(b, vec![0.3, -0.1, 0.2]);
    let mut b = vec![0.5, 0.5];
    bias_update(&mut b, &[10, 0], 0.01).unwrap();
    assert_eq!(b, vec![0.49, 0.51]);
    let mut b = vec![0.0; 3];
    bias_update(&mut b, &[2, 1, 0], 0.1).unwrap();
    assert_eq!(b, vec![-0.1, 0.0, 0.1]);
    assert!(matches!(bias_update(&mut b, &[1, 1, 1], -0.1), Err(Error::Config(_))));
}

#[test]
fn aux_mode_never_moves_bias() {
    let c = MoeLayerConfig { d: 4, n: 4, m: 1, k: 1, k_s: 0, ffn_inner: 4, routing_mode: RoutingMode::AuxLoss, gamma: 0.5, ..Default::default() };
    let mut state = RouterState::new(rng::normal_tensor(0, "c", &[4, 4], 1.0));
    for t in 0..10 {
        state.route(&[t as f64, 1.0, 0.0, -1.0], &c).unwrap();
    }
    state.end_batch(&c).unwrap();
    assert_eq!(state.bias, vec![0.0; 4]);
}

#[test]
fn favoured_expert_bias_falls_until_share_drops() {
    let c = MoeLayerConfig { d: 16, n: 8, m: 1, k: 2, k_s: 0, ffn_inner: 8, gamma: 0.01, ..Default::default() };
    let run = run_skew(0, &c, &SkewSim { updates: 100, ..Default::default() }).unwrap();
    let fav: Vec<f64> = run.bias_trajectory.iter().map(|b| b[0]).collect();
    let first_drop = run.favoured_share.iter().position(|&s| s < 2.0 / 8.0).expect("share never fell");
    assert!(first_drop > 0);
    for w in fav[..first_drop].windows(2) {
        assert!(w[1] < w[0]);
    }
    assert!(run.favoured_share[0] > 0.3, "{:?}", &run.favoured_share[..5]);
}

#[test]
fn gate_gradients_match_finite_differences() {
    let c = MoeLayerConfig { d: 3, n: 2, m: 1, k: 1, k_s: 0, ffn_inner: 4, routing_mode: RoutingMode::AuxLoss, alpha: 0.1, ..Default::default() };
    let mut store = ParamStore::new();
    let w = MoeWeights::init(&mut store, "moe", &c, 7, Init::normal(0.6)).unwrap();
    let u = rng::normal_tensor(8, "u", &[5, c.d], 1.0);
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, _, t)| t.clone()).collect();
    inputs.push(u);
    let n = inputs.len();
    let report = gradcheck::check(&inputs, 1e-5, |tape, vars| {
        let p = Bound::from_vars(vars[..n - 1].to_vec());
        let (h, aux, _) = moe_forward(&vars[n - 1], &w, &p, &c)?;
        gradcheck::weighted_sum(tape, &h, 1)?.add(&aux)
    })
    .unwrap();
    assert!(report.worst() < 1e-4, "{:?}", report.max_rel_err);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let (h, _, stats) = moe_forward(&tape.constant(inputs[n - 1].clone()), &w, &p, &c).unwrap();
    h.sum().backward().unwrap();
    // An expert that no token selected gets no gradient.
    for (e, &count) in stats.counts.iter().enumerate() {
        let g = p[w.routed[e].w1].grad().unwrap();
        assert_eq!(count == 0, g.norm() == 0.0);
    }
}

fn train_load_ratio(alpha: f64, seed: u64) -> f64 {
    let c = MoeLayerConfig {
        d: 8,
        n: 4,
        m: 1,
        k: 1,
        k_s: 0,
        ffn_inner: 8,
        alpha,
        routing_mode: RoutingMode::AuxLoss,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let w = MoeWeights::init(&mut store, "moe", &c, seed, Init::normal(0.3)).unwrap();
    let target = rng::normal_tensor(seed, "target", &[c.d, c.d], 0.3);
    let mut opt = Adam::new(AdamConfig { lr: 0.01, warmup_steps: 0, ..Default::default() }, &store);
    let mut r = rng::stream(seed, "tokens");
    let shift: Vec<f64> = store.get(w.centroids).row(0).to_vec();
    let batch = |r: &mut rng::Rng| {
        let mut x = rng::randn(r, &[64, c.d]);
        for row in x.data_mut().chunks_mut(c.d) {
            for (v, s) in row.iter_mut().zip(&shift) {
                *v += 4.0 * s;
            }
        }
        x
    };
    let mut last = LoadStats::new(4);
    for _ in 0..150 {
        let x = batch(&mut r);
        let y = x.matmul(&target).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let (h, aux, _) = moe_forward(&tape.constant(x), &w, &p, &c).unwrap();
        let err = h.sub(&tape.constant(y)).unwrap();
        let loss = err.mul(&err).unwrap().mean().add(&aux).unwrap();
        loss.backward().unwrap();
        opt.step(&mut store, &p.grads(), Precision::F64).unwrap();
    }
    let x = batch(&mut r);
    for t in 0..x.rows() {
        last.record(&route(x.row(t), store.get(w.centroids), store.get(w.bias).data(), &c).unwrap());
    }
    last.max_mean_ratio()
}

#[test]
fn aux_loss_training_balances_load() {
    for seed in 0..2 {
        let with = train_load_ratio(0.5, seed);
        let without = train_load_ratio(0.0, seed);
        assert!(with < without, "seed {seed}: {with} vs {without}");
    }
}
