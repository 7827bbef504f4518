use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam with decoupled weight decay and bias correction.
///
/// Moment slots are created lazily at zero, one per parameter name.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: IndexMap<String, Vec<f64>>,
    second: IndexMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, first: IndexMap::new(), second: IndexMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter in `params`. Parameters absent
    /// from `grads` are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &IndexMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adamw_step",
                        lhs: p.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
            }
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= c.lr * c.weight_decay * *w;
                *w -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    /// Moment buffers as named tensors (`adam.m.<name>`, `adam.v.<name>`)
    /// shaped like their parameters, for checkpointing.
    pub fn state_tensors(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, p) in params.iter() {
            for (prefix, table) in [("adam.m", &self.first), ("adam.v", &self.second)] {
                let data = table.get(name).cloned().unwrap_or_else(|| vec![0.0; p.len()]);
                let t = Tensor::new(p.shape().to_vec(), data).unwrap();
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out
    }

    /// Inverse of [`state_tensors`](Self::state_tensors).
    pub fn restore(
        config: AdamWConfig,
        step: u64,
        params: &ParamStore,
        tensors: &IndexMap<String, Tensor>,
    ) -> Result<Self> {
        let mut opt = Self::new(config);
        opt.step = step;
        for (name, _) in params.iter() {
            for (prefix, table) in [("adam.m", &mut opt.first), ("adam.v", &mut opt.second)] {
                let key = format!("{prefix}.{name}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| TensorError::Checkpoint(format!("missing optimizer slot {key}")))?;
                table.insert(name.to_string(), t.data().to_vec());
            }
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![1], vec![v]).unwrap());
        s
    }

    fn grad(v: f64) -> IndexMap<String, Tensor> {
        let mut g = IndexMap::new();
        g.insert("w".to_string(), Tensor::new(vec![1], vec![v]).unwrap());
        g
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = one_param(1.25);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..10 {
            opt.step(&mut p, &grad(0.0)).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data()[0], 1.25);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut p = one_param(2.0);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(cfg);
        opt.step(&mut p, &grad(0.0)).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_update_tends_to_lr_times_sign() {
        let lr = 1e-3;
        let mut opt = AdamW::new(AdamWConfig { lr, weight_decay: 0.0, ..Default::default() });
        for g in [0.37, -4.2] {
            let mut p = one_param(0.0);
            let mut last = 0.0;
            for _ in 0..1000 {
                let before = p.get("w").unwrap().data()[0];
                opt.step(&mut p, &grad(g)).unwrap();
                last = p.get("w").unwrap().data()[0] - before;
            }
            assert!((last + lr * g.signum()).abs() < 1e-3 * lr, "{last}");
            opt = AdamW::new(opt.config);
        }
    }

    #[test]
    fn state_roundtrip_resumes_identically() {
        let cfg = AdamWConfig { lr: 0.01, ..Default::default() };
        let mut a = one_param(1.0);
        let mut opt = AdamW::new(cfg);
        for k in 0..5 {
            opt.step(&mut a, &grad(k as f64 - 2.0)).unwrap();
        }
        let saved: IndexMap<_, _> = opt.state_tensors(&a).into_iter().collect();
        let mut resumed = AdamW::restore(cfg, opt.steps_taken(), &a, &saved).unwrap();
        let mut b = a.clone();
        opt.step(&mut a, &grad(0.7)).unwrap();
        resumed.step(&mut b, &grad(0.7)).unwrap();
        assert_eq!(a, b);
    }
}
