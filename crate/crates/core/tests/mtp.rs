mod common;

use common::{dense_mla_block_oracle, matvec, rms, scramble};
use tinyseek::attention::AttentionConfig;
use tinyseek::model::{ModelConfig, ToyModel};
use tinyseek::mtp::*;
use tinyseek::tensor::rng;
use tinyseek::{Error, Tape, Tensor};

fn tiny(depth: usize, lambda: f64) -> ModelConfig {
    ModelConfig {
        vocab_size: 5,
        attention: AttentionConfig { d: 4, n_h: 1, d_h: 4, d_c: 3, d_c_q: 2, d_h_r: 2, layers: 1, ..Default::default() },
        dense_inner: 6,
        mtp: MtpConfig { depth, lambda },
        ..Default::default()
    }
}

fn scrambled(cfg: ModelConfig, seed: u64) -> ToyModel {
    let mut m = ToyModel::new(cfg, seed).unwrap();
    scramble(&mut m.store, seed, 0.5);
    m
}

fn depth_logits(m: &ToyModel, tokens: &[usize]) -> Vec<Tensor> {
    let t = tokens.len() - 1;
    let tape = Tape::new();
    let p = m.store.bind_frozen(&tape);
    let trunk = m.trunk(&tokens[..t], t, &p).unwrap();
    let out = mtp_forward(&trunk.h, &[tokens.to_vec()], m, &p).unwrap();
    out.logits.iter().map(|l| (*l.value()).clone()).collect()
}

#[test]
fn uniform_predictor_closed_form() {
    let (t, v) = (8, 5);
    let tokens: Vec<usize> = (0..=t).map(|i| i % v).collect();
    let logits = vec![Tensor::zeros(&[t - 1, v])];
    let l = mtp_depth_losses(&logits, &tokens).unwrap();
    let want = (t - 1) as f64 / t as f64 * (v as f64).ln();
    assert!((l[0] - want).abs() < 1e-12);
}

#[test]
fn scripted_loss_matches_direct_summation() {
    let (t, v, lambda) = (6usize, 4usize, 0.3);
    let tokens = vec![1usize, 3, 0, 2, 2, 1, 3];
    let logits: Vec<Tensor> = (1..=2)
        .map(|k| {
            let data = (0..(t - k) * v).map(|i| ((i * 7 + k * 3) % 11) as f64 * 0.25 - 1.0).collect();
            Tensor::new(&[t - k, v], data).unwrap()
        })
        .collect();
    let mut total = 0.0;
    for k in 1..=2usize {
        let mut s = 0.0;
        // 1-based target index i = 2+k..=T+1 is row i−2−k, token t_{i−1}.
        for i in (2 + k)..=(t + 1) {
            let row = logits[k - 1].row(i - 2 - k);
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            s += (row[tokens[i - 1]].exp() / z).ln();
        }
        total += -s / t as f64;
    }
    let want = lambda / 2.0 * total;
    let got = mtp_loss(&logits, &tokens, lambda).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert_eq!(mtp_loss(&logits, &tokens, 0.0).unwrap(), 0.0);
    assert_eq!(mtp_loss(&[], &tokens, 0.7).unwrap(), 0.0);
    assert_eq!(mtp_loss(&logits, &tokens, 2.0 * lambda).unwrap(), 2.0 * got);
    assert!(matches!(mtp_loss(&logits, &tokens, -0.1), Err(Error::Config(_))));
}

#[test]
fn single_depth_matches_straight_line_oracle() {
    let m = scrambled(tiny(1, 0.5), 3);
    let tokens = vec![2usize, 4, 0, 1];
    let t = 3;
    let cfg = &m.cfg;
    let s = &m.store;
    let emb = |tok: usize| s.get(m.embed).row(tok).to_vec();
    let h0_in: Vec<Vec<f64>> = tokens[..t].iter().map(|&x| emb(x)).collect();
    let h0 = dense_mla_block_oracle(&h0_in, &m.blocks[0], s, cfg);
    let md = &m.mtp[0];
    let x: Vec<Vec<f64>> = (0..t - 1)
        .map(|j| {
            let mut cat = rms(&emb(tokens[j + 1]), s.get(md.norm_emb).data(), cfg.norm_eps);
            cat.extend(rms(&h0[j], s.get(md.norm_prev).data(), cfg.norm_eps));
            matvec(s.get(md.proj), &cat)
        })
        .collect();
    let h1 = dense_mla_block_oracle(&x, &md.block, s, cfg);
    let got = depth_logits(&m, &tokens);
    for (j, row) in h1.iter().enumerate() {
        let want = matvec(s.get(m.head_id()), &rms(row, s.get(m.final_norm).data(), cfg.norm_eps));
        for (a, b) in got[0].row(j).iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn depth_chain_is_causal() {
    let m = scrambled(tiny(2, 0.3), 5);
    let tokens = vec![0usize, 1, 2, 3, 4, 0, 1, 2];
    let base = depth_logits(&m, &tokens);
    for p in 1..tokens.len() {
        let mut alt = tokens.clone();
        alt[p] = (alt[p] + 2) % 5;
        let other = depth_logits(&m, &alt);
        for (k, (a, b)) in base.iter().zip(&other).enumerate() {
            // Depth k+1 position j reads tokens up to j + k + 1.
            for j in 0..a.rows() {
                if j + k + 1 < p {
                    assert_eq!(a.row(j), b.row(j), "depth {} position {j}, perturbed {p}", k + 1);
                }
            }
        }
    }
}

#[test]
fn later_depths_do_not_touch_earlier_ones() {
    let m = scrambled(tiny(2, 0.3), 6);
    let tokens = vec![4usize, 3, 2, 1, 0, 1, 2];
    let before = depth_logits(&m, &tokens);
    let mut m2 = m.clone();
    let names: Vec<_> = m2.store.iter().filter(|(_, n, _)| n.starts_with("mtp2.")).map(|(id, _, _)| id).collect();
    for id in names {
        let shape = m2.store.get(id).shape().to_vec();
        *m2.store.get_mut(id) = rng::normal_tensor(99, "other", &shape, 1.0);
    }
    let after = depth_logits(&m2, &tokens);
    assert_eq!(before[0], after[0]);
    assert_ne!(before[1], after[1]);
}

#[test]
fn mtp_gradients_reach_shared_embedding_and_head() {
    let m = scrambled(tiny(1, 1.0), 7);
    let tokens = vec![vec![1usize, 2, 3, 4, 0, 1]];
    let t = 5;
    let tape = Tape::new();
    let p = m.store.bind(&tape);
    let trunk = m.trunk(&tokens[0][..t], t, &p).unwrap();
    let out = mtp_forward(&trunk.h, &tokens, &m, &p).unwrap();
    let loss = mtp_depth_losses_tape(&out, 1, t).unwrap().remove(0);
    loss.backward().unwrap();
    let head = p[m.head_id()].grad().unwrap();
    let embed = p[m.embed].grad().unwrap();
    assert!(head.norm() > 0.0);
    assert!(embed.norm() > 0.0);
    assert_ne!(m.head_id(), m.mtp[0].proj);
    // Plain and tape per-depth losses agree.
    let plain = mtp_depth_losses(&[(*out.logits[0].value()).clone()], &tokens[0]).unwrap();
    assert!((plain[0] - loss.item()).abs() < 1e-12);
}

#[test]
fn too_short_sequence_is_contract_error() {
    let m = scrambled(tiny(2, 0.3), 8);
    let tokens = vec![vec![1usize, 2, 3]];
    let tape = Tape::new();
    let p = m.store.bind_frozen(&tape);
    let trunk = m.trunk(&tokens[0][..2], 2, &p).unwrap();
    assert!(matches!(mtp_forward(&trunk.h, &tokens, &m, &p), Err(Error::Contract(_))));
}
