use super::config::{FfnKind, ModelConfig};
use crate::attention::{
    mha_forward_infer, mha_forward_seqs, mla_forward_infer, mla_forward_seqs, AttentionVariant, Init,
    KvLayerCache, LatentLayerCache, LayerCache, MhaWeights, MlaWeights,
};
use crate::error::{contract, Result};
use crate::moe::{moe_branch, moe_branch_plain, bias_update, ExpertWeights, LoadStats, MoeWeights, RoutingMode};
use crate::tensor::{Bound, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub enum AttnWeights {
    Mha(MhaWeights),
    Mla(MlaWeights),
}

#[derive(Clone, Debug)]
pub enum FfnWeights {
    Dense(ExpertWeights),
    Moe(MoeWeights),
}

/// Pre-norm residual block: `h += Attn(norm(h)); h += FFN(norm(h))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub attn_norm: ParamId,
    pub attn: AttnWeights,
    pub ffn_norm: ParamId,
    pub ffn: FfnWeights,
}

pub struct BlockOut {
    pub h: Var,
    /// Balance loss of the MoE sublayer, if any.
    pub aux: Option<Var>,
    pub stats: Option<LoadStats>,
}

/// Plain-vector RMS normalization, matching the tape op.
pub fn rms_norm_plain(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

impl Block {
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let d = cfg.d();
        let init = Init { std: cfg.init_std, zero_out: true };
        let attn_norm = store.add(format!("{prefix}.attn_norm"), Tensor::full(&[d], 1.0))?;
        let attn = match cfg.attention_variant {
            AttentionVariant::Mha => {
                AttnWeights::Mha(MhaWeights::init(store, &format!("{prefix}.attn"), &cfg.attention, seed, init)?)
            }
            AttentionVariant::Mla => {
                AttnWeights::Mla(MlaWeights::init(store, &format!("{prefix}.attn"), &cfg.attention, seed, init)?)
            }
        };
        let ffn_norm = store.add(format!("{prefix}.ffn_norm"), Tensor::full(&[d], 1.0))?;
        let ffn = match cfg.ffn {
            FfnKind::Dense => FfnWeights::Dense(ExpertWeights::init(
                store,
                &format!("{prefix}.ffn"),
                d,
                cfg.dense_inner,
                seed,
                init,
            )?),
            FfnKind::Moe => FfnWeights::Moe(MoeWeights::init(store, &format!("{prefix}.moe"), &cfg.moe, seed, init)?),
        };
        Ok(Self { attn_norm, attn, ffn_norm, ffn })
    }

    /// Runs `B` stacked sequences of `seq_len` rows.
    pub fn forward(&self, h: &Var, p: &Bound, cfg: &ModelConfig, seq_len: usize) -> Result<BlockOut> {
        let x = h.rms_norm(&p[self.attn_norm], cfg.norm_eps)?;
        let a = match &self.attn {
            AttnWeights::Mha(w) => mha_forward_seqs(&x, w, p, &cfg.attention, seq_len)?,
            AttnWeights::Mla(w) => mla_forward_seqs(&x, w, p, &cfg.attention, seq_len)?,
        };
        let h = h.add(&a)?;
        let x = h.rms_norm(&p[self.ffn_norm], cfg.norm_eps)?;
        match &self.ffn {
            FfnWeights::Dense(e) => Ok(BlockOut { h: h.add(&e.forward(&x, p, cfg.moe.activation)?)?, aux: None, stats: None }),
            FfnWeights::Moe(w) => {
                let out = moe_branch(&x, w, p, &cfg.moe)?;
                Ok(BlockOut { h: h.add(&out.branch)?, aux: Some(out.aux_loss), stats: Some(out.stats) })
            }
        }
    }

    pub fn new_cache(&self, cfg: &ModelConfig) -> LayerCache {
        match self.attn {
            AttnWeights::Mha(_) => LayerCache::Kv(KvLayerCache::new(cfg.attention.inner())),
            AttnWeights::Mla(_) => LayerCache::Latent(LatentLayerCache::new(cfg.attention.d_c, cfg.attention.d_h_r)),
        }
    }

    /// Decodes one token through the block, appending to `cache`.
    pub fn forward_token(&self, h: &[f64], store: &ParamStore, cfg: &ModelConfig, cache: &mut LayerCache) -> Result<Vec<f64>> {
        let x = rms_norm_plain(h, store.get(self.attn_norm).data(), cfg.norm_eps);
        let a = match (&self.attn, cache) {
            (AttnWeights::Mha(w), LayerCache::Kv(c)) => mha_forward_infer(&x, w, store, &cfg.attention, c)?,
            (AttnWeights::Mla(w), LayerCache::Latent(c)) => mla_forward_infer(&x, w, store, &cfg.attention, c)?,
            _ => return contract("cache kind does not match the attention variant"),
        };
        let h: Vec<f64> = h.iter().zip(&a).map(|(x, y)| x + y).collect();
        let x = rms_norm_plain(&h, store.get(self.ffn_norm).data(), cfg.norm_eps);
        let f = match &self.ffn {
            FfnWeights::Dense(e) => e.forward_plain(&x, store, cfg.moe.activation)?,
            FfnWeights::Moe(w) => moe_branch_plain(&x, w, store, &cfg.moe)?.0,
        };
        Ok(h.iter().zip(&f).map(|(x, y)| x + y).collect())
    }

    /// Loss-free bias step from a batch's loads; no-op otherwise.
    pub fn update_router(&self, store: &mut ParamStore, cfg: &ModelConfig, stats: &LoadStats) -> Result<()> {
        if let FfnWeights::Moe(w) = &self.ffn {
            if cfg.moe.routing_mode == RoutingMode::LossFree {
                bias_update(store.get_mut(w.bias).data_mut(), &stats.counts, cfg.moe.gamma)?;
            }
        }
        Ok(())
    }
}
