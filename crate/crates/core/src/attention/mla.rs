//! Multi-head latent attention.
//!
//! Keys and values are reconstructed from one low-rank latent per token,
//! queries from their own latent, and positional information travels on a
//! small decoupled rotary path whose key is shared across heads:
//!
//! ```text
//! c_kv = W_dkv h      k_c = W_uk c_kv      v_c = W_uv c_kv
//! c_q  = W_dq h       q_c = W_uq c_q       q_r = RoPE(W_qr c_q)   k_r = RoPE(W_kr h)
//! logit(t, j, head i) = ([q_c,i ; q_r,i] · [k_c,i ; k_r]) / sqrt(d_h + d_h_r)
//! u = W_o [Σ_j softmax_j(logit) v_c,i]_i
//! ```
//!
//! Decoding only caches `(c_kv, k_r)`. The inference path never forms `k_c`
//! or `v_c`: the key up-projection is folded into the query and the value
//! up-projection is applied after the attention-weighted latent sum.

use super::cache::LatentLayerCache;
use super::mha::concat_cols;
use super::rope::rope_heads;
use super::{attend, AttentionConfig, Init};
use crate::error::{dim_err, Result};
use crate::tensor::{dot, softmax_in_place, Bound, ParamId, ParamStore, Tensor, Var};

/// Projection matrices, stored `[out × in]`.
#[derive(Clone, Debug)]
pub struct MlaWeights {
    /// `[d_c × d]`
    pub w_dkv: ParamId,
    /// `[d_h·n_h × d_c]`
    pub w_uk: ParamId,
    /// `[d_h·n_h × d_c]`
    pub w_uv: ParamId,
    /// `[d_c_q × d]`
    pub w_dq: ParamId,
    /// `[d_h·n_h × d_c_q]`
    pub w_uq: ParamId,
    /// `[d_h_r·n_h × d_c_q]`
    pub w_qr: ParamId,
    /// `[d_h_r × d]`
    pub w_kr: ParamId,
    /// `[d × d_h·n_h]`
    pub w_o: ParamId,
}

impl MlaWeights {
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, seed: u64, init: Init) -> Result<Self> {
        let shapes = Self::shapes(cfg);
        let mut ids = Vec::with_capacity(8);
        for (name, shape) in shapes {
            let std = if name == "w_o" { init.out_std() } else { init.std };
            ids.push(store.add_normal(seed, &format!("{prefix}.{name}"), &shape, std)?);
        }
        Ok(Self {
            w_dkv: ids[0],
            w_uk: ids[1],
            w_uv: ids[2],
            w_dq: ids[3],
            w_uq: ids[4],
            w_qr: ids[5],
            w_kr: ids[6],
            w_o: ids[7],
        })
    }

    pub fn shapes(cfg: &AttentionConfig) -> [(&'static str, [usize; 2]); 8] {
        let (d, inner) = (cfg.d, cfg.inner());
        [
            ("w_dkv", [cfg.d_c, d]),
            ("w_uk", [inner, cfg.d_c]),
            ("w_uv", [inner, cfg.d_c]),
            ("w_dq", [cfg.d_c_q, d]),
            ("w_uq", [inner, cfg.d_c_q]),
            ("w_qr", [cfg.d_h_r * cfg.n_h, cfg.d_c_q]),
            ("w_kr", [cfg.d_h_r, d]),
            ("w_o", [d, inner]),
        ]
    }

    pub fn num_params(cfg: &AttentionConfig) -> usize {
        Self::shapes(cfg).iter().map(|(_, s)| s[0] * s[1]).sum()
    }

    fn ids(&self) -> [ParamId; 8] {
        [self.w_dkv, self.w_uk, self.w_uv, self.w_dq, self.w_uq, self.w_qr, self.w_kr, self.w_o]
    }

    /// Checks stored shapes against `cfg` and that every entry is finite.
    pub fn validate(&self, store: &ParamStore, cfg: &AttentionConfig) -> Result<()> {
        for (id, (name, shape)) in self.ids().iter().zip(Self::shapes(cfg)) {
            let t = store.get(*id);
            if t.shape() != shape {
                return dim_err(format!("{name} has shape {:?}, expected {shape:?}", t.shape()));
            }
            if !t.is_finite() {
                return Err(crate::Error::Numeric(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }
}

/// Training-path MLA over one sequence `h: [T×d]`. Returns the attention
/// output `[T×d]` and the latent cache entries of the sequence.
pub fn mla_forward_train(
    h: &Var,
    w: &MlaWeights,
    p: &Bound,
    cfg: &AttentionConfig,
) -> Result<(Var, LatentLayerCache)> {
    let t = h.value().rows();
    let (u, c_kv, k_r) = mla_core(h, w, p, cfg, t)?;
    let mut cache = LatentLayerCache::new(cfg.d_c, cfg.d_h_r);
    let (cv, kv) = (c_kv.value(), k_r.map(|k| k.value()));
    for i in 0..t {
        let kr_row = kv.as_ref().map_or(&[][..], |k| k.row(i));
        cache.push(cv.row(i), kr_row);
    }
    Ok((u, cache))
}

/// Training-path MLA over `B` stacked sequences of `seq_len` rows each.
pub fn mla_forward_seqs(h: &Var, w: &MlaWeights, p: &Bound, cfg: &AttentionConfig, seq_len: usize) -> Result<Var> {
    Ok(mla_core(h, w, p, cfg, seq_len)?.0)
}

fn mla_core(
    h: &Var,
    w: &MlaWeights,
    p: &Bound,
    cfg: &AttentionConfig,
    seq_len: usize,
) -> Result<(Var, Var, Option<Var>)> {
    let (rows, d) = h.value().dims2();
    if d != cfg.d {
        return dim_err(format!("mla input {:?} does not match d = {}", h.shape(), cfg.d));
    }
    let tape = h.tape();
    if rows == 0 || seq_len == 0 {
        let empty = tape.constant(Tensor::zeros(&[0, d]));
        let c = tape.constant(Tensor::zeros(&[0, cfg.d_c]));
        return Ok((empty, c, None));
    }
    if rows % seq_len != 0 {
        return dim_err(format!("{rows} rows are not a multiple of seq_len {seq_len}"));
    }
    let c_kv = h.matmul_t(&p[w.w_dkv])?;
    let k_c = c_kv.matmul_t(&p[w.w_uk])?;
    let v_c = c_kv.matmul_t(&p[w.w_uv])?;
    let c_q = h.matmul_t(&p[w.w_dq])?;
    let q_c = c_q.matmul_t(&p[w.w_uq])?;
    let rotary = cfg.d_h_r > 0;
    let (q_r_raw, k_r_raw) = if rotary {
        (Some(c_q.matmul_t(&p[w.w_qr])?), Some(h.matmul_t(&p[w.w_kr])?))
    } else {
        (None, None)
    };
    let scale = 1.0 / ((cfg.d_h + cfg.d_h_r) as f64).sqrt();
    let mut seqs = Vec::with_capacity(rows / seq_len);
    let mut k_r_all = Vec::new();
    for b in 0..rows / seq_len {
        let (r0, r1) = (b * seq_len, (b + 1) * seq_len);
        let (qc, kc, vc) = (q_c.rows(r0, r1)?, k_c.rows(r0, r1)?, v_c.rows(r0, r1)?);
        let rot = match (&q_r_raw, &k_r_raw) {
            (Some(q), Some(k)) => {
                let qr = q.rows(r0, r1)?.rope(0, cfg.rope_base, cfg.d_h_r)?;
                let kr = k.rows(r0, r1)?.rope(0, cfg.rope_base, cfg.d_h_r)?;
                k_r_all.push(kr.clone());
                Some((qr, kr))
            }
            _ => None,
        };
        let mut heads = Vec::with_capacity(cfg.n_h);
        for i in 0..cfg.n_h {
            let (c0, c1) = (i * cfg.d_h, (i + 1) * cfg.d_h);
            let (mut qi, mut ki) = (qc.cols(c0, c1)?, kc.cols(c0, c1)?);
            if let Some((qr, kr)) = &rot {
                let qri = qr.cols(i * cfg.d_h_r, (i + 1) * cfg.d_h_r)?;
                qi = tape.concat(&[&qi, &qri], 1)?;
                ki = tape.concat(&[&ki, kr], 1)?;
            }
            heads.push(attend(&qi, &ki, &vc.cols(c0, c1)?, scale)?);
        }
        seqs.push(concat_cols(tape, &heads)?);
    }
    let o = if seqs.len() == 1 {
        seqs.pop().unwrap()
    } else {
        tape.concat(&seqs.iter().collect::<Vec<_>>(), 0)?
    };
    let k_r = match k_r_all.len() {
        0 => None,
        1 => k_r_all.pop(),
        _ => Some(tape.concat(&k_r_all.iter().collect::<Vec<_>>(), 0)?),
    };
    Ok((o.matmul_t(&p[w.w_o])?, c_kv, k_r))
}

/// Decodes one token against the latent cache, appending its
/// `(c_kv, k_r)` entry. Position is the number of tokens already cached.
pub fn mla_forward_infer(
    h_t: &[f64],
    w: &MlaWeights,
    params: &ParamStore,
    cfg: &AttentionConfig,
    cache: &mut LatentLayerCache,
) -> Result<Vec<f64>> {
    if h_t.len() != cfg.d {
        return dim_err(format!("token width {} does not match d = {}", h_t.len(), cfg.d));
    }
    let pos = cache.len();
    let c_kv = params.get(w.w_dkv).matvec(h_t)?;
    let mut k_r = params.get(w.w_kr).matvec(h_t)?;
    rope_heads(&mut k_r, pos, cfg.rope_base, cfg.d_h_r);
    cache.push(&c_kv, &k_r);

    let c_q = params.get(w.w_dq).matvec(h_t)?;
    let q_c = params.get(w.w_uq).matvec(&c_q)?;
    let mut q_r = params.get(w.w_qr).matvec(&c_q)?;
    rope_heads(&mut q_r, pos, cfg.rope_base, cfg.d_h_r);

    let w_uk = params.get(w.w_uk);
    let w_uv = params.get(w.w_uv);
    let scale = 1.0 / ((cfg.d_h + cfg.d_h_r) as f64).sqrt();
    let n = cache.len();
    let mut o = Vec::with_capacity(cfg.inner());
    for i in 0..cfg.n_h {
        let head = i * cfg.d_h..(i + 1) * cfg.d_h;
        // q_c,i · (W_uk,i c_j) = (W_uk,iᵀ q_c,i) · c_j
        let q_lat = head_block_t(w_uk, head.clone(), &q_c[head.clone()]);
        let q_rot = &q_r[i * cfg.d_h_r..(i + 1) * cfg.d_h_r];
        let mut a: Vec<f64> = (0..n)
            .map(|j| scale * (dot(&q_lat, cache.c_kv(j)) + dot(q_rot, cache.k_r(j))))
            .collect();
        softmax_in_place(&mut a);
        // Σ_j a_j W_uv,i c_j = W_uv,i (Σ_j a_j c_j)
        let mut z = vec![0.0; cfg.d_c];
        for (j, aj) in a.iter().enumerate() {
            for (zz, c) in z.iter_mut().zip(cache.c_kv(j)) {
                *zz += aj * c;
            }
        }
        o.extend(head.map(|r| dot(w_uv.row(r), &z)));
    }
    params.get(w.w_o).matvec(&o)
}

/// `W[rows, :]ᵀ · v` for a contiguous block of rows.
fn head_block_t(w: &Tensor, rows: std::ops::Range<usize>, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (r, &vr) in rows.zip(v) {
        for (o, x) in out.iter_mut().zip(w.row(r)) {
            *o += vr * x;
        }
    }
    out
}
