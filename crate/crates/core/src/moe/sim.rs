//! Router-only simulation of load balancing under a persistent affinity
//! skew: tokens lean toward one expert's centroid batch after batch.

use super::config::{MoeLayerConfig, RoutingMode};
use super::router::{LoadStats, RouterState};
use crate::error::Result;
use crate::tensor::{rng, Tensor};

#[derive(Clone, Debug)]
pub struct SkewSim {
    pub batch: usize,
    pub updates: usize,
    /// Length of the shift toward the favoured centroid direction.
    pub skew: f64,
    /// Index of the favoured expert.
    pub favoured: usize,
    /// Standard deviation of the router centroids.
    pub centroid_std: f64,
}

impl Default for SkewSim {
    fn default() -> Self {
        Self { batch: 256, updates: 200, skew: 1.5, favoured: 0, centroid_std: 0.25 }
    }
}

#[derive(Clone, Debug)]
pub struct SkewRun {
    /// Bias vector after each update.
    pub bias_trajectory: Vec<Vec<f64>>,
    /// Max/mean load ratio of each training batch.
    pub batch_ratios: Vec<f64>,
    /// Selection share of the favoured expert per batch.
    pub favoured_share: Vec<f64>,
    /// Held-out load with the learned biases.
    pub final_load: LoadStats,
    /// Held-out load with biases frozen at zero.
    pub frozen_load: LoadStats,
}

fn skewed_batch(r: &mut rng::Rng, n: usize, d: usize, dir: &[f64], skew: f64) -> Tensor {
    let mut t = rng::randn(r, &[n, d]);
    for row in t.data_mut().chunks_mut(d) {
        for (x, v) in row.iter_mut().zip(dir) {
            *x += skew * v;
        }
    }
    t
}

/// Runs `sim.updates` loss-free bias updates, then measures held-out load
/// with learned and with frozen (zero) biases. `cfg.gamma` is the step.
pub fn run_skew(seed: u64, cfg: &MoeLayerConfig, sim: &SkewSim) -> Result<SkewRun> {
    cfg.validate()?;
    let cfg = MoeLayerConfig { routing_mode: RoutingMode::LossFree, ..cfg.clone() };
    let d = cfg.d;
    let centroids = rng::normal_tensor(seed, "sim.centroids", &[cfg.n_routed(), d], sim.centroid_std);
    let c = centroids.row(sim.favoured);
    let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dir: Vec<f64> = c.iter().map(|x| x / norm).collect();
    let mut state = RouterState::new(centroids.clone());
    let mut r = rng::stream(seed, "sim.tokens");
    let mut run = SkewRun {
        bias_trajectory: Vec::new(),
        batch_ratios: Vec::new(),
        favoured_share: Vec::new(),
        final_load: LoadStats::default(),
        frozen_load: LoadStats::default(),
    };
    for _ in 0..sim.updates {
        let x = skewed_batch(&mut r, sim.batch, d, &dir, sim.skew);
        for t in 0..sim.batch {
            state.route(x.row(t), &cfg)?;
        }
        let stats = state.end_batch(&cfg)?;
        run.batch_ratios.push(stats.max_mean_ratio());
        let total: u64 = stats.counts.iter().sum();
        run.favoured_share.push(stats.counts[sim.favoured] as f64 / total as f64);
        run.bias_trajectory.push(state.bias.clone());
    }
    let held_out = skewed_batch(&mut r, sim.batch * 4, d, &dir, sim.skew);
    let mut frozen = RouterState::new(centroids);
    for t in 0..held_out.rows() {
        state.route(held_out.row(t), &cfg)?;
        frozen.route(held_out.row(t), &cfg)?;
    }
    run.final_load = state.stats.clone();
    run.frozen_load = frozen.stats.clone();
    Ok(run)
}
