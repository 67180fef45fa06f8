use std::path::Path;

use super::block::{rms_norm_plain, Block};
use super::config::ModelConfig;
use crate::attention::LatentKVCache;
use crate::error::{contract, dim_err, Error, Result};
use crate::moe::LoadStats;
use crate::mtp::{mtp_depth_losses_tape, mtp_forward, MtpModule};
use crate::tensor::{Bound, Checkpoint, ParamId, ParamStore, Precision, Tensor, Var};

/// Embedding → blocks → final norm → head, plus optional depth modules.
#[derive(Clone, Debug)]
pub struct ToyModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    /// `[V × d]`
    pub embed: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: ParamId,
    /// `[V × d]`; `None` when tied to the embedding.
    pub head: Option<ParamId>,
    pub mtp: Vec<MtpModule>,
}

/// Trunk states of a batch.
pub struct Trunk {
    /// Last block output before the final norm, `[B·T × d]`.
    pub h: Var,
    pub aux: Vec<Var>,
    pub stats: Vec<LoadStats>,
}

/// Loss terms of one training batch.
pub struct LossParts {
    /// `main + Σ balance + (λ/D) Σ_k (Lᵏ + depth balance)`.
    pub total: Var,
    pub main: f64,
    /// `Lᵏ` per depth.
    pub mtp: Vec<f64>,
    pub aux: f64,
    /// Router loads of every MoE sublayer: trunk blocks, then depth blocks.
    pub stats: Vec<LoadStats>,
}

impl ToyModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (v, d) = (cfg.vocab_size, cfg.d());
        let mut store = ParamStore::new();
        let embed = store.add_normal(seed, "embed", &[v, d], cfg.init_std)?;
        let blocks = (0..cfg.layers())
            .map(|l| Block::init(&mut store, &format!("layer{l}"), &cfg, seed))
            .collect::<Result<_>>()?;
        let final_norm = store.add("final_norm", Tensor::full(&[d], 1.0))?;
        let head = if cfg.tied_head {
            None
        } else {
            Some(store.add_normal(seed, "head", &[v, d], cfg.init_std)?)
        };
        let mtp = (1..=cfg.mtp.depth)
            .map(|k| MtpModule::init(&mut store, k, &cfg, seed))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, store, embed, blocks, final_norm, head, mtp })
    }

    pub fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    pub fn head_id(&self) -> ParamId {
        self.head.unwrap_or(self.embed)
    }

    /// Trunk over `B` stacked sequences of `seq_len` tokens.
    pub fn trunk(&self, tokens: &[usize], seq_len: usize, p: &Bound) -> Result<Trunk> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size()) {
            return dim_err(format!("token id {bad} outside vocabulary of {}", self.vocab_size()));
        }
        let mut h = p[self.embed].gather_rows(tokens)?;
        let mut aux = Vec::new();
        let mut stats = Vec::new();
        for b in &self.blocks {
            let o = b.forward(&h, p, &self.cfg, seq_len)?;
            h = o.h;
            aux.extend(o.aux);
            stats.extend(o.stats);
        }
        Ok(Trunk { h, aux, stats })
    }

    /// Shared output head: `Head(RMSNorm(h))`.
    pub fn logits(&self, h: &Var, p: &Bound) -> Result<Var> {
        h.rms_norm(&p[self.final_norm], self.cfg.norm_eps)?.matmul_t(&p[self.head_id()])
    }

    /// Training loss of `B` sequences of `T + 1` tokens.
    pub fn loss(&self, batch: &[Vec<usize>], p: &Bound) -> Result<LossParts> {
        let b = batch.len();
        let t = batch.first().map_or(0, |s| s.len()).saturating_sub(1);
        if b == 0 || t == 0 || batch.iter().any(|s| s.len() != t + 1) {
            return contract("a batch needs equal-length sequences of at least two tokens");
        }
        let inputs: Vec<usize> = batch.iter().flat_map(|s| s[..t].iter().copied()).collect();
        let targets: Vec<usize> = batch.iter().flat_map(|s| s[1..].iter().copied()).collect();
        let trunk = self.trunk(&inputs, t, p)?;
        let main = self.logits(&trunk.h, p)?.cross_entropy(&targets)?;
        let mut total = main.clone();
        let mut aux_sum = 0.0;
        for a in &trunk.aux {
            aux_sum += a.item();
            total = total.add(a)?;
        }
        let mut stats = trunk.stats;
        let mut mtp = Vec::new();
        if !self.mtp.is_empty() {
            let out = mtp_forward(&trunk.h, batch, self, p)?;
            let per = mtp_depth_losses_tape(&out, b, t)?;
            let mut extra = per[0].clone();
            for v in per.iter().skip(1).chain(&out.aux) {
                extra = extra.add(v)?;
            }
            total = total.add(&extra.scale(self.cfg.mtp.lambda / self.mtp.len() as f64))?;
            mtp = per.iter().map(Var::item).collect();
            stats.extend(out.stats);
        }
        Ok(LossParts { total, main: main.item(), mtp, aux: aux_sum, stats })
    }

    /// Loss-free router steps for every MoE sublayer, in `LossParts::stats`
    /// order.
    pub fn update_routers(&mut self, stats: &[LoadStats]) -> Result<()> {
        let blocks = self.blocks.iter().chain(self.mtp.iter().map(|m| &m.block));
        let moe_blocks: Vec<&Block> = blocks.filter(|b| matches!(b.ffn, super::block::FfnWeights::Moe(_))).collect();
        if moe_blocks.len() != stats.len() {
            return contract("router statistics do not match the MoE sublayers");
        }
        for (b, s) in moe_blocks.into_iter().zip(stats) {
            b.update_router(&mut self.store, &self.cfg, s)?;
        }
        Ok(())
    }

    pub fn new_cache(&self) -> LatentKVCache {
        LatentKVCache { layers: self.blocks.iter().map(|b| b.new_cache(&self.cfg)).collect() }
    }

    /// Next-token logits after appending `token` to the decoding cache.
    pub fn step_logits(&self, token: usize, cache: &mut LatentKVCache) -> Result<Vec<f64>> {
        if token >= self.vocab_size() {
            return dim_err(format!("token id {token} outside vocabulary of {}", self.vocab_size()));
        }
        let mut h = self.store.get(self.embed).row(token).to_vec();
        for (b, c) in self.blocks.iter().zip(&mut cache.layers) {
            h = b.forward_token(&h, &self.store, &self.cfg, c)?;
        }
        let x = rms_norm_plain(&h, self.store.get(self.final_norm).data(), self.cfg.norm_eps);
        self.store.get(self.head_id()).matvec(&x)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        let cfg = serde_json::to_string(&self.cfg).map_err(|e| Error::Format(e.to_string()))?;
        ck.meta.insert("model_config".into(), cfg);
        for (_, name, t) in self.store.iter() {
            ck.push(name, Precision::F64, t.clone());
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg_json = ck
            .meta("model_config")
            .ok_or_else(|| Error::Format("checkpoint has no model_config".into()))?;
        let cfg: ModelConfig = serde_json::from_str(cfg_json).map_err(|e| Error::Format(e.to_string()))?;
        let mut model = Self::new(cfg, 0)?;
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let t = ck
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != model.store.get(id).shape() {
                return Err(Error::Format(format!("tensor {name} has shape {:?}", t.shape())));
            }
            *model.store.get_mut(id) = t.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
