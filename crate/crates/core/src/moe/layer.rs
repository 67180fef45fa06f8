use super::config::{Activation, MoeLayerConfig, RoutingMode};
use super::router::{route_scores, LoadStats, Routing};
use crate::attention::Init;
use crate::error::{dim_err, Result};
use crate::tensor::{softmax_in_place, Bound, ParamId, ParamStore, Tensor, Var};

/// Two-layer feed-forward expert: `W2 · act(W1 · x)`.
#[derive(Clone, Debug)]
pub struct ExpertWeights {
    /// `[inner × d]`
    pub w1: ParamId,
    /// `[d × inner]`
    pub w2: ParamId,
}

impl ExpertWeights {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, inner: usize, seed: u64, init: Init) -> Result<Self> {
        Ok(Self {
            w1: store.add_normal(seed, &format!("{prefix}.w1"), &[inner, d], init.std)?,
            w2: store.add_normal(seed, &format!("{prefix}.w2"), &[d, inner], init.out_std())?,
        })
    }

    pub fn forward(&self, x: &Var, p: &Bound, act: Activation) -> Result<Var> {
        let a = x.matmul_t(&p[self.w1])?;
        let a = match act {
            Activation::Silu => a.silu(),
            Activation::Relu => a.clamp(0.0, f64::INFINITY),
        };
        a.matmul_t(&p[self.w2])
    }

    pub fn forward_plain(&self, x: &[f64], store: &ParamStore, act: Activation) -> Result<Vec<f64>> {
        let mut a = store.get(self.w1).matvec(x)?;
        for v in &mut a {
            *v = match act {
                Activation::Silu => *v / (1.0 + (-*v).exp()),
                Activation::Relu => v.max(0.0),
            };
        }
        store.get(self.w2).matvec(&a)
    }
}

/// Parameters of one mixture-of-experts layer. The router bias is a
/// non-trainable buffer.
#[derive(Clone, Debug)]
pub struct MoeWeights {
    /// `[N_r × d]`
    pub centroids: ParamId,
    /// `[N_r]`
    pub bias: ParamId,
    pub shared: Vec<ExpertWeights>,
    pub routed: Vec<ExpertWeights>,
}

impl MoeWeights {
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &MoeLayerConfig, seed: u64, init: Init) -> Result<Self> {
        cfg.validate()?;
        let (d, inner) = (cfg.d, cfg.expert_inner());
        let centroids = store.add_normal(seed, &format!("{prefix}.centroids"), &[cfg.n_routed(), d], init.std)?;
        let bias = store.add_buffer(format!("{prefix}.bias"), Tensor::zeros(&[cfg.n_routed()]))?;
        let shared = (0..cfg.k_s)
            .map(|i| ExpertWeights::init(store, &format!("{prefix}.shared{i}"), d, inner, seed, init))
            .collect::<Result<_>>()?;
        let routed = (0..cfg.n_routed())
            .map(|i| ExpertWeights::init(store, &format!("{prefix}.routed{i}"), d, inner, seed, init))
            .collect::<Result<_>>()?;
        Ok(Self { centroids, bias, shared, routed })
    }
}

/// Result of one layer evaluation on the tape.
pub struct MoeOutput {
    /// `Σ shared FFN(u) + Σ gated routed FFN(u)`, without the residual.
    pub branch: Var,
    /// `α · Σ f_i P_i` in aux-loss mode, 0 otherwise.
    pub aux_loss: Var,
    pub stats: LoadStats,
}

/// Expert mixture over `u: [T×d]` without the residual term.
pub fn moe_branch(u: &Var, w: &MoeWeights, p: &Bound, cfg: &MoeLayerConfig) -> Result<MoeOutput> {
    let (t, d) = u.value().dims2();
    if d != cfg.d {
        return dim_err(format!("moe input {:?} does not match d = {}", u.shape(), cfg.d));
    }
    let tape = u.tape();
    let n_r = cfg.n_routed();
    let s = u.matmul_t(&p[w.centroids])?.softmax_rows(1.0)?;
    let sv = s.value();
    let bias = p[w.bias].value();
    let mut stats = LoadStats::new(n_r);
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n_r];
    for i in 0..t {
        let r = route_scores(sv.row(i), bias.data(), cfg.k_routed(), cfg.routing_mode)?;
        for &e in &r.selected {
            rows[e].push(i);
        }
        stats.record(&r);
    }
    let mut parts = Vec::new();
    let mut dst = Vec::new();
    for (e, idx) in rows.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let y = w.routed[e].forward(&u.gather_rows(idx)?, p, cfg.activation)?;
        let pairs: Vec<(usize, usize)> = idx.iter().map(|&i| (i, e)).collect();
        parts.push(y.mul_col(&s.pick(&pairs)?)?);
        dst.extend_from_slice(idx);
    }
    let mut out = if parts.is_empty() {
        tape.constant(Tensor::zeros(&[t, d]))
    } else {
        let stacked = if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            tape.concat(&parts.iter().collect::<Vec<_>>(), 0)?
        };
        stacked.scatter_rows(&dst, t)?
    };
    for e in &w.shared {
        out = out.add(&e.forward(u, p, cfg.activation)?)?;
    }
    let aux_loss = if cfg.routing_mode == RoutingMode::AuxLoss && cfg.alpha > 0.0 && t > 0 {
        let f = tape.constant(Tensor::vector(stats.load_fractions(cfg.k_routed())?));
        s.mean_rows()?.dot(&f)?.scale(cfg.alpha)
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    Ok(MoeOutput { branch: out, aux_loss, stats })
}

/// `h = u + Σ shared FFN(u) + Σ gated routed FFN(u)` plus the balance loss.
pub fn moe_forward(u: &Var, w: &MoeWeights, p: &Bound, cfg: &MoeLayerConfig) -> Result<(Var, Var, LoadStats)> {
    let out = moe_branch(u, w, p, cfg)?;
    Ok((u.add(&out.branch)?, out.aux_loss, out.stats))
}

/// Single-token branch output on plain tensors, for decoding.
pub fn moe_branch_plain(u: &[f64], w: &MoeWeights, store: &ParamStore, cfg: &MoeLayerConfig) -> Result<(Vec<f64>, Routing)> {
    let mut s = store.get(w.centroids).matvec(u)?;
    softmax_in_place(&mut s);
    let r = route_scores(&s, store.get(w.bias).data(), cfg.k_routed(), cfg.routing_mode)?;
    let mut out = vec![0.0; cfg.d];
    for &e in &r.selected {
        let y = w.routed[e].forward_plain(u, store, cfg.activation)?;
        for (o, v) in out.iter_mut().zip(y) {
            *o += r.gates[e] * v;
        }
    }
    for e in &w.shared {
        for (o, v) in out.iter_mut().zip(e.forward_plain(u, store, cfg.activation)?) {
            *o += v;
        }
    }
    Ok((out, r))
}
