//! Adaptive-moment optimizer with linear warmup and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, Error, Result};
use crate::tensor::{Checkpoint, Precision, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps over which the step size ramps linearly from `lr/warmup` to `lr`.
    pub warmup_steps: u64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup_steps: 100, clip_norm: 1.0 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return config_err(format!("lr = {} must be finite and nonnegative", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return config_err("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return config_err("eps must be positive");
        }
        if !(self.clip_norm >= 0.0) {
            return config_err("clip_norm must be nonnegative");
        }
        Ok(())
    }

    /// Step size at 1-based step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.warmup_steps == 0 || t >= self.warmup_steps {
            self.lr
        } else {
            self.lr * t as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { cfg, m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Descends along `grads` (aligned with `store`; `None` entries are
    /// skipped). Non-finite gradients abort the step untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], precision: Precision) -> Result<StepInfo> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return contract("gradient list does not match the parameter store");
        }
        let sq: f64 = grads.iter().flatten().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric("non-finite gradient norm".into()));
        }
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let lr = self.cfg.lr_at(self.step);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = store.ids().nth(i).unwrap();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j] * clip;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.cfg.eps);
            }
            precision.round_slice(p);
        }
        Ok(StepInfo { lr, grad_norm: norm })
    }

    /// Adds moment buffers and the step counter to `ck`.
    pub fn save_into(&self, ck: &mut Checkpoint, store: &ParamStore) {
        ck.meta.insert("adam.step".into(), self.step.to_string());
        for (i, (_, name, _)) in store.iter().enumerate() {
            ck.push(format!("adam.m.{name}"), Precision::F64, self.m[i].clone());
            ck.push(format!("adam.v.{name}"), Precision::F64, self.v[i].clone());
        }
    }

    pub fn load_from(cfg: AdamConfig, ck: &Checkpoint, store: &ParamStore) -> Result<Self> {
        let step = ck
            .meta("adam.step")
            .ok_or_else(|| Error::Format("checkpoint lacks optimizer state".into()))?
            .parse()
            .map_err(|_| Error::Format("bad adam.step".into()))?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (_, name, t) in store.iter() {
            for (buf, kind) in [(&mut m, "m"), (&mut v, "v")] {
                let s = ck
                    .get(&format!("adam.{kind}.{name}"))
                    .ok_or_else(|| Error::Format(format!("missing adam.{kind}.{name}")))?;
                if s.shape() != t.shape() {
                    return Err(Error::Format(format!("adam.{kind}.{name} has wrong shape")));
                }
                buf.push(s.clone());
            }
        }
        Ok(Self { cfg, m, v, step })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear() {
        let cfg = AdamConfig { lr: 1.0, warmup_steps: 4, ..Default::default() };
        let lrs: Vec<f64> = (1..=6).map(|t| cfg.lr_at(t)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![3.0, -2.0])).unwrap();
        let cfg = AdamConfig { lr: 0.1, warmup_steps: 0, clip_norm: 0.0, ..Default::default() };
        let mut opt = Adam::new(cfg, &store);
        for _ in 0..500 {
            let g = Tensor::vector(store.get(id).data().iter().map(|x| 2.0 * x).collect());
            opt.step(&mut store, &[Some(g)], Precision::F64).unwrap();
        }
        assert!(store.get(id).norm() < 1e-2);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::vector(vec![1.0])).unwrap();
        let before = store.clone();
        let mut opt = Adam::new(AdamConfig { lr: 0.0, ..Default::default() }, &store);
        opt.step(&mut store, &[Some(Tensor::vector(vec![5.0]))], Precision::F64).unwrap();
        assert_eq!(store.get(store.id("x").unwrap()), before.get(before.id("x").unwrap()));
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::vector(vec![1.0])).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &store);
        let r = opt.step(&mut store, &[Some(Tensor::vector(vec![f64::NAN]))], Precision::F64);
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert_eq!(opt.steps_taken(), 0);
    }
}
