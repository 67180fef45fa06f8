//! Independent plain-loop oracles shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use tinyseek::attention::{AttentionConfig, MhaWeights, MlaWeights};
use tinyseek::{ParamStore, Tensor};

pub fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    assert_eq!(c, x.len());
    (0..r)
        .map(|i| (0..c).map(|j| w.data()[i * c + j] * x[j]).sum())
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Rotates the pairs `(2i, 2i+1)` of a vector of width `n` by
/// `pos · base^(−2i/n)`.
pub fn rope(x: &[f64], pos: usize, base: f64) -> Vec<f64> {
    let n = x.len();
    let mut out = x.to_vec();
    for i in 0..n / 2 {
        let th = pos as f64 * base.powf(-((2 * i) as f64) / n as f64);
        out[2 * i] = x[2 * i] * th.cos() - x[2 * i + 1] * th.sin();
        out[2 * i + 1] = x[2 * i] * th.sin() + x[2 * i + 1] * th.cos();
    }
    out
}

fn rows(h: &Tensor) -> Vec<Vec<f64>> {
    let d = h.shape()[1];
    h.data().chunks(d).map(|r| r.to_vec()).collect()
}

/// Per-head loop over equations of the MHA baseline.
pub fn mha_oracle(h: &Tensor, w: &MhaWeights, p: &ParamStore, cfg: &AttentionConfig) -> Vec<Vec<f64>> {
    let toks = rows(h);
    let dh = cfg.d_h;
    let head = |v: &[f64], i: usize| v[i * dh..(i + 1) * dh].to_vec();
    let mut q = Vec::new();
    let mut k = Vec::new();
    let mut v = Vec::new();
    for (t, x) in toks.iter().enumerate() {
        let (qt, kt) = (matvec(p.get(w.w_q), x), matvec(p.get(w.w_k), x));
        let (mut qh, mut kh) = (Vec::new(), Vec::new());
        for i in 0..cfg.n_h {
            if cfg.mha_rope {
                qh.push(rope(&head(&qt, i), t, cfg.rope_base));
                kh.push(rope(&head(&kt, i), t, cfg.rope_base));
            } else {
                qh.push(head(&qt, i));
                kh.push(head(&kt, i));
            }
        }
        q.push(qh);
        k.push(kh);
        let vt = matvec(p.get(w.w_v), x);
        v.push((0..cfg.n_h).map(|i| head(&vt, i)).collect::<Vec<_>>());
    }
    let mut out = Vec::new();
    for t in 0..toks.len() {
        let mut o = Vec::new();
        for i in 0..cfg.n_h {
            let logits: Vec<f64> = (0..=t).map(|j| dot(&q[t][i], &k[j][i]) / (dh as f64).sqrt()).collect();
            let a = softmax(&logits);
            for c in 0..dh {
                o.push((0..=t).map(|j| a[j] * v[j][i][c]).sum());
            }
        }
        out.push(matvec(p.get(w.w_o), &o));
    }
    out
}

/// Equation-by-equation MLA forward, forming full keys and values.
pub fn mla_oracle(h: &Tensor, w: &MlaWeights, p: &ParamStore, cfg: &AttentionConfig) -> Vec<Vec<f64>> {
    let toks = rows(h);
    let (dh, dr) = (cfg.d_h, cfg.d_h_r);
    let mut q = Vec::new();
    let mut k = Vec::new();
    let mut v = Vec::new();
    for (t, x) in toks.iter().enumerate() {
        let c_kv = matvec(p.get(w.w_dkv), x);
        let k_c = matvec(p.get(w.w_uk), &c_kv);
        let v_c = matvec(p.get(w.w_uv), &c_kv);
        let c_q = matvec(p.get(w.w_dq), x);
        let q_c = matvec(p.get(w.w_uq), &c_q);
        let q_r_all = matvec(p.get(w.w_qr), &c_q);
        let k_r = rope(&matvec(p.get(w.w_kr), x), t, cfg.rope_base);
        let mut qh = Vec::new();
        let mut kh = Vec::new();
        let mut vh = Vec::new();
        for i in 0..cfg.n_h {
            let mut qi = q_c[i * dh..(i + 1) * dh].to_vec();
            qi.extend(rope(&q_r_all[i * dr..(i + 1) * dr], t, cfg.rope_base));
            let mut ki = k_c[i * dh..(i + 1) * dh].to_vec();
            ki.extend(&k_r);
            qh.push(qi);
            kh.push(ki);
            vh.push(v_c[i * dh..(i + 1) * dh].to_vec());
        }
        q.push(qh);
        k.push(kh);
        v.push(vh);
    }
    let scale = 1.0 / ((dh + dr) as f64).sqrt();
    let mut out = Vec::new();
    for t in 0..toks.len() {
        let mut o = Vec::new();
        for i in 0..cfg.n_h {
            let logits: Vec<f64> = (0..=t).map(|j| scale * dot(&q[t][i], &k[j][i])).collect();
            let a = softmax(&logits);
            for c in 0..dh {
                o.push((0..=t).map(|j| a[j] * v[j][i][c]).sum());
            }
        }
        out.push(matvec(p.get(w.w_o), &o));
    }
    out
}

/// `max|a − b| / max|b|`, the infinity-norm relative difference.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    diff / scale.max(f64::MIN_POSITIVE)
}

pub fn rms(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    x.iter().zip(g).map(|(v, gi)| v / (ms + eps).sqrt() * gi).collect()
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Pre-norm block with MLA attention and a dense SiLU feed-forward.
pub fn dense_mla_block_oracle(
    h: &[Vec<f64>],
    block: &tinyseek::model::Block,
    p: &ParamStore,
    cfg: &tinyseek::model::ModelConfig,
) -> Vec<Vec<f64>> {
    use tinyseek::model::{AttnWeights, FfnWeights};
    let (AttnWeights::Mla(w), FfnWeights::Dense(e)) = (&block.attn, &block.ffn) else {
        panic!("oracle covers MLA + dense blocks only");
    };
    let d = cfg.d();
    let normed: Vec<f64> = h.iter().flat_map(|r| rms(r, p.get(block.attn_norm).data(), cfg.norm_eps)).collect();
    let a = mla_oracle(&Tensor::new(&[h.len(), d], normed).unwrap(), w, p, &cfg.attention);
    h.iter()
        .zip(a)
        .map(|(x, a)| {
            let mid: Vec<f64> = x.iter().zip(&a).map(|(u, v)| u + v).collect();
            let n = rms(&mid, p.get(block.ffn_norm).data(), cfg.norm_eps);
            let inner: Vec<f64> = matvec(p.get(e.w1), &n).into_iter().map(silu).collect();
            let f = matvec(p.get(e.w2), &inner);
            mid.iter().zip(f).map(|(u, v)| u + v).collect()
        })
        .collect()
}

/// Replaces every trainable tensor with fresh normals so no branch starts
/// at zero.
pub fn scramble(store: &mut ParamStore, seed: u64, std: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = tinyseek::tensor::rng::normal_tensor(seed, &name, &shape, std);
    }
}

type OpFn = fn(&tinyseek::Tape, &[tinyseek::Var]) -> tinyseek::Result<tinyseek::Var>;

/// Every differentiable tape operation as a scalar-valued function of its
/// inputs, with input shapes.
pub fn differentiable_ops() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    use tinyseek::tensor::gradcheck::weighted_sum as ws;
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], |t, v| ws(t, &v[0].matmul(&v[1])?, 1)),
        ("matmul_t", vec![vec![3, 4], vec![5, 4]], |t, v| ws(t, &v[0].matmul_t(&v[1])?, 1)),
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| ws(t, &v[0].add(&v[1])?, 1)),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, v| ws(t, &v[0].sub(&v[1])?, 1)),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| ws(t, &v[0].mul(&v[1])?, 1)),
        ("minimum", vec![vec![3, 4], vec![3, 4]], |t, v| ws(t, &v[0].minimum(&v[1])?, 1)),
        ("add_row", vec![vec![3, 4], vec![4]], |t, v| ws(t, &v[0].add_row(&v[1])?, 1)),
        ("mul_col", vec![vec![3, 4], vec![3]], |t, v| ws(t, &v[0].mul_col(&v[1])?, 1)),
        ("scale", vec![vec![3, 4]], |t, v| ws(t, &v[0].scale(-1.7), 1)),
        ("neg", vec![vec![3, 4]], |t, v| ws(t, &v[0].neg(), 1)),
        ("add_scalar", vec![vec![3, 4]], |t, v| ws(t, &v[0].add_scalar(0.3), 1)),
        ("exp", vec![vec![3, 4]], |t, v| ws(t, &v[0].exp(), 1)),
        ("ln", vec![vec![3, 4]], |t, v| ws(t, &v[0].mul(&v[0])?.add_scalar(0.5).ln(), 1)),
        ("silu", vec![vec![3, 4]], |t, v| ws(t, &v[0].silu(), 1)),
        ("clamp", vec![vec![3, 4]], |t, v| ws(t, &v[0].clamp(-0.5, 0.5), 1)),
        ("sum", vec![vec![3, 4]], |_, v| Ok(v[0].sum().scale(0.7))),
        ("mean", vec![vec![3, 4]], |_, v| Ok(v[0].mean())),
        ("mean_rows", vec![vec![3, 4]], |t, v| ws(t, &v[0].mean_rows()?, 1)),
        ("dot", vec![vec![3, 4], vec![3, 4]], |_, v| v[0].dot(&v[1])),
        ("softmax_rows", vec![vec![3, 4]], |t, v| ws(t, &v[0].softmax_rows(0.8)?, 1)),
        ("causal_softmax_rows", vec![vec![3, 5]], |t, v| ws(t, &v[0].causal_softmax_rows(0.8)?, 1)),
        ("log_softmax_rows", vec![vec![3, 4]], |t, v| ws(t, &v[0].log_softmax_rows()?, 1)),
        ("cross_entropy", vec![vec![3, 4]], |_, v| v[0].cross_entropy(&[2, 0, 3])),
        ("slice", vec![vec![4, 5]], |t, v| ws(t, &v[0].slice(1, 3, 2, 5)?, 1)),
        ("cols", vec![vec![4, 5]], |t, v| ws(t, &v[0].cols(1, 4)?, 1)),
        ("rows", vec![vec![4, 5]], |t, v| ws(t, &v[0].rows(2, 4)?, 1)),
        ("rope", vec![vec![3, 8]], |t, v| ws(t, &v[0].rope(2, 10_000.0, 4)?, 1)),
        ("rms_norm", vec![vec![3, 4], vec![4]], |t, v| ws(t, &v[0].rms_norm(&v[1], 1e-6)?, 1)),
        ("gather_rows", vec![vec![4, 3]], |t, v| ws(t, &v[0].gather_rows(&[3, 0, 3, 1])?, 1)),
        ("scatter_rows", vec![vec![4, 3]], |t, v| ws(t, &v[0].scatter_rows(&[2, 0, 2, 4], 5)?, 1)),
        ("pick", vec![vec![3, 4]], |t, v| ws(t, &v[0].pick(&[(0, 1), (2, 3), (0, 1)])?, 1)),
        ("pick_per_row", vec![vec![3, 4]], |t, v| ws(t, &v[0].pick_per_row(&[3, 0, 2])?, 1)),
        ("reshape", vec![vec![3, 4]], |t, v| ws(t, &v[0].reshape(&[2, 6])?, 1)),
        ("transpose", vec![vec![3, 4]], |t, v| ws(t, &v[0].transpose()?, 1)),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |t, v| ws(t, &t.concat(&[&v[0], &v[1]], 0)?, 1)),
        ("concat_cols", vec![vec![2, 3], vec![2, 1]], |t, v| ws(t, &t.concat(&[&v[0], &v[1]], 1)?, 1)),
    ]
}

/// Worst central-difference error per operation over `seeds` random inputs.
pub fn op_gradient_errors(seeds: u64) -> Vec<(&'static str, f64)> {
    differentiable_ops()
        .into_iter()
        .map(|(name, shapes, f)| {
            let mut worst: f64 = 0.0;
            for seed in 0..seeds {
                let inputs: Vec<Tensor> = shapes
                    .iter()
                    .enumerate()
                    .map(|(i, s)| tinyseek::tensor::rng::normal_tensor(seed, &format!("op.{name}.{i}"), s, 1.0))
                    .collect();
                let r = tinyseek::tensor::gradcheck::check(&inputs, 1e-5, f).unwrap();
                worst = worst.max(r.worst());
            }
            (name, worst)
        })
        .collect()
}
