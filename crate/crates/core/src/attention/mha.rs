//! Standard multi-head attention, the comparison baseline.

use super::cache::KvLayerCache;
use super::rope::rope_heads;
use super::{attend, Init};
use crate::error::{dim_err, Result};
use crate::tensor::{softmax_in_place, Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// `W_q, W_k, W_v: [d_h·n_h × d]`, `W_o: [d × d_h·n_h]`.
#[derive(Clone, Debug)]
pub struct MhaWeights {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl MhaWeights {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &super::AttentionConfig,
        seed: u64,
        init: Init,
    ) -> Result<Self> {
        let (d, inner) = (cfg.d, cfg.inner());
        Ok(Self {
            w_q: store.add_normal(seed, &format!("{prefix}.w_q"), &[inner, d], init.std)?,
            w_k: store.add_normal(seed, &format!("{prefix}.w_k"), &[inner, d], init.std)?,
            w_v: store.add_normal(seed, &format!("{prefix}.w_v"), &[inner, d], init.std)?,
            w_o: store.add_normal(seed, &format!("{prefix}.w_o"), &[d, inner], init.out_std())?,
        })
    }

    pub fn num_params(cfg: &super::AttentionConfig) -> usize {
        4 * cfg.d * cfg.inner()
    }
}

/// Causal multi-head attention over one sequence `h: [T×d]`.
pub fn mha_forward(h: &Var, w: &MhaWeights, p: &Bound, cfg: &super::AttentionConfig) -> Result<Var> {
    let t = h.value().rows();
    mha_forward_seqs(h, w, p, cfg, t)
}

/// Same as [`mha_forward`] for `B` stacked sequences of `seq_len` rows each.
pub fn mha_forward_seqs(
    h: &Var,
    w: &MhaWeights,
    p: &Bound,
    cfg: &super::AttentionConfig,
    seq_len: usize,
) -> Result<Var> {
    let (rows, d) = h.value().dims2();
    if d != cfg.d {
        return dim_err(format!("mha input {:?} does not match d = {}", h.shape(), cfg.d));
    }
    let tape = h.tape();
    if rows == 0 || seq_len == 0 {
        return Ok(tape.constant(Tensor::zeros(&[0, d])));
    }
    if rows % seq_len != 0 {
        return dim_err(format!("{rows} rows are not a multiple of seq_len {seq_len}"));
    }
    let q = h.matmul_t(&p[w.w_q])?;
    let k = h.matmul_t(&p[w.w_k])?;
    let v = h.matmul_t(&p[w.w_v])?;
    let scale = 1.0 / (cfg.d_h as f64).sqrt();
    let mut seqs = Vec::with_capacity(rows / seq_len);
    for b in 0..rows / seq_len {
        let (r0, r1) = (b * seq_len, (b + 1) * seq_len);
        let (mut qb, mut kb) = (q.rows(r0, r1)?, k.rows(r0, r1)?);
        if cfg.mha_rope {
            qb = qb.rope(0, cfg.rope_base, cfg.d_h)?;
            kb = kb.rope(0, cfg.rope_base, cfg.d_h)?;
        }
        let vb = v.rows(r0, r1)?;
        let heads = (0..cfg.n_h)
            .map(|i| {
                let (c0, c1) = (i * cfg.d_h, (i + 1) * cfg.d_h);
                attend(&qb.cols(c0, c1)?, &kb.cols(c0, c1)?, &vb.cols(c0, c1)?, scale)
            })
            .collect::<Result<Vec<_>>>()?;
        seqs.push(concat_cols(tape, &heads)?);
    }
    let o = if seqs.len() == 1 {
        seqs.pop().unwrap()
    } else {
        tape.concat(&seqs.iter().collect::<Vec<_>>(), 0)?
    };
    o.matmul_t(&p[w.w_o])
}

pub(crate) fn concat_cols(tape: &Tape, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 {
        return Ok(parts[0].clone());
    }
    tape.concat(&parts.iter().collect::<Vec<_>>(), 1)
}

/// Incremental decoding of one token against a full key/value cache.
pub fn mha_forward_infer(
    h_t: &[f64],
    w: &MhaWeights,
    params: &ParamStore,
    cfg: &super::AttentionConfig,
    cache: &mut KvLayerCache,
) -> Result<Vec<f64>> {
    if h_t.len() != cfg.d {
        return dim_err(format!("token width {} does not match d = {}", h_t.len(), cfg.d));
    }
    let pos = cache.len();
    let mut q = params.get(w.w_q).matvec(h_t)?;
    let mut k = params.get(w.w_k).matvec(h_t)?;
    let v = params.get(w.w_v).matvec(h_t)?;
    if cfg.mha_rope {
        rope_heads(&mut q, pos, cfg.rope_base, cfg.d_h);
        rope_heads(&mut k, pos, cfg.rope_base, cfg.d_h);
    }
    cache.push(&k, &v);
    let scale = 1.0 / (cfg.d_h as f64).sqrt();
    let n = cache.len();
    let mut o = vec![0.0; cfg.inner()];
    for i in 0..cfg.n_h {
        let r = i * cfg.d_h..(i + 1) * cfg.d_h;
        let mut a: Vec<f64> = (0..n)
            .map(|j| scale * crate::tensor::dot(&q[r.clone()], &cache.k(j)[r.clone()]))
            .collect();
        softmax_in_place(&mut a);
        for (j, aj) in a.iter().enumerate() {
            for (oo, vv) in o[r.clone()].iter_mut().zip(&cache.v(j)[r.clone()]) {
                *oo += aj * vv;
            }
        }
    }
    params.get(w.w_o).matvec(&o)
}
