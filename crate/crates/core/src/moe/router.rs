use super::config::{MoeLayerConfig, RoutingMode};
use crate::error::{config_err, contract, dim_err, Result};
use crate::tensor::{softmax_in_place, Tensor};

/// Routing decision for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    /// Affinities `s_i` over routed experts.
    pub scores: Vec<f64>,
    /// Selected routed experts, best first.
    pub selected: Vec<usize>,
    /// `s_i` for selected experts, 0 elsewhere.
    pub gates: Vec<f64>,
}

/// `s = softmax(E u)` over routed experts, `E: [N_r × d]`.
pub fn affinities(u: &[f64], centroids: &Tensor) -> Result<Vec<f64>> {
    let mut s = centroids.matvec(u)?;
    if s.iter().any(|x| !x.is_finite()) {
        return Err(crate::Error::Numeric("non-finite router logits".into()));
    }
    softmax_in_place(&mut s);
    Ok(s)
}

/// Indices of the `k` largest keys, best first; ties go to the lower index.
pub fn top_k(keys: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Selects `k_r` experts from precomputed affinities.
///
/// In loss-free mode the selection key is `s_i + b_i`; the gate is always
/// the original `s_i`.
pub fn route_scores(scores: &[f64], bias: &[f64], k_r: usize, mode: RoutingMode) -> Result<Routing> {
    if k_r > scores.len() {
        return config_err(format!("K_r = {k_r} exceeds N_r = {}", scores.len()));
    }
    if bias.len() != scores.len() {
        return dim_err(format!("{} biases for {} experts", bias.len(), scores.len()));
    }
    let selected = match mode {
        RoutingMode::AuxLoss => top_k(scores, k_r),
        RoutingMode::LossFree => {
            let keys: Vec<f64> = scores.iter().zip(bias).map(|(s, b)| s + b).collect();
            top_k(&keys, k_r)
        }
    };
    let mut gates = vec![0.0; scores.len()];
    for &i in &selected {
        gates[i] = scores[i];
    }
    Ok(Routing { scores: scores.to_vec(), selected, gates })
}

/// Routes one token `u` given centroids and biases.
pub fn route(u: &[f64], centroids: &Tensor, bias: &[f64], cfg: &MoeLayerConfig) -> Result<Routing> {
    let s = affinities(u, centroids)?;
    route_scores(&s, bias, cfg.k_routed(), cfg.routing_mode)
}

/// Per-batch load counters behind `f_i` and `P_i`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadStats {
    /// Tokens that selected each routed expert.
    pub counts: Vec<u64>,
    /// Sum of `s_i` over tokens.
    pub prob_sum: Vec<f64>,
    pub tokens: usize,
}

impl LoadStats {
    pub fn new(n_routed: usize) -> Self {
        Self { counts: vec![0; n_routed], prob_sum: vec![0.0; n_routed], tokens: 0 }
    }

    pub fn record(&mut self, r: &Routing) {
        for &i in &r.selected {
            self.counts[i] += 1;
        }
        for (p, s) in self.prob_sum.iter_mut().zip(&r.scores) {
            *p += s;
        }
        self.tokens += 1;
    }

    /// Adds another batch's counters, in call order.
    pub fn merge(&mut self, other: &LoadStats) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.prob_sum.iter_mut().zip(&other.prob_sum) {
            *a += b;
        }
        self.tokens += other.tokens;
    }

    /// `f_i = N′/(K′·T) · count_i`.
    pub fn load_fractions(&self, k_prime: usize) -> Result<Vec<f64>> {
        if self.tokens == 0 || k_prime == 0 {
            return contract("load fractions need T > 0 and K' > 0");
        }
        let scale = self.counts.len() as f64 / (k_prime as f64 * self.tokens as f64);
        Ok(self.counts.iter().map(|&c| scale * c as f64).collect())
    }

    /// `P_i = (1/T) · Σ_t s_{i,t}`.
    pub fn mean_probs(&self) -> Result<Vec<f64>> {
        if self.tokens == 0 {
            return contract("mean affinities need T > 0");
        }
        Ok(self.prob_sum.iter().map(|p| p / self.tokens as f64).collect())
    }

    /// Largest expert load over the mean load; 1 is perfectly balanced.
    pub fn max_mean_ratio(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return 1.0;
        }
        let mean = total as f64 / self.counts.len() as f64;
        *self.counts.iter().max().unwrap() as f64 / mean
    }
}

/// Expert-level balance loss `α · Σ f_i · P_i`.
pub fn balance_loss(f: &[f64], p: &[f64], alpha: f64) -> Result<f64> {
    if f.len() != p.len() {
        return dim_err(format!("{} load fractions for {} affinities", f.len(), p.len()));
    }
    if f.is_empty() {
        return contract("balance loss over zero experts");
    }
    Ok(alpha * f.iter().zip(p).map(|(a, b)| a * b).sum::<f64>())
}

/// `b_i ← b_i − γ` for loads above the batch mean, `b_i + γ` below it.
pub fn bias_update(bias: &mut [f64], loads: &[u64], gamma: f64) -> Result<()> {
    if !(gamma >= 0.0) {
        return config_err(format!("gamma = {gamma} must be nonnegative"));
    }
    if bias.len() != loads.len() {
        return dim_err(format!("{} biases for {} loads", bias.len(), loads.len()));
    }
    if loads.is_empty() {
        return Ok(());
    }
    // Compare count·N with the total to stay exact in integers.
    let total: u64 = loads.iter().sum();
    let n = loads.len() as u64;
    for (b, &l) in bias.iter_mut().zip(loads) {
        match (l * n).cmp(&total) {
            std::cmp::Ordering::Greater => *b -= gamma,
            std::cmp::Ordering::Less => *b += gamma,
            std::cmp::Ordering::Equal => {}
        }
    }
    Ok(())
}

/// Centroids, biases and load counters of one router.
#[derive(Clone, Debug)]
pub struct RouterState {
    /// `[N_r × d]`
    pub centroids: Tensor,
    pub bias: Vec<f64>,
    pub stats: LoadStats,
}

impl RouterState {
    pub fn new(centroids: Tensor) -> Self {
        let n = centroids.rows();
        Self { centroids, bias: vec![0.0; n], stats: LoadStats::new(n) }
    }

    /// Routes `u` and records it in the counters.
    pub fn route(&mut self, u: &[f64], cfg: &MoeLayerConfig) -> Result<Routing> {
        let r = route(u, &self.centroids, &self.bias, cfg)?;
        self.stats.record(&r);
        Ok(r)
    }

    /// Applies the bias step from the current counters and clears them.
    /// Biases stay at zero in aux-loss mode.
    pub fn end_batch(&mut self, cfg: &MoeLayerConfig) -> Result<LoadStats> {
        if cfg.routing_mode == RoutingMode::LossFree {
            bias_update(&mut self.bias, &self.stats.counts, cfg.gamma)?;
        }
        let n = self.bias.len();
        Ok(std::mem::replace(&mut self.stats, LoadStats::new(n)))
    }
}
