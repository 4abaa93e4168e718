//! AdamW with linear warmup and gradient accumulation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates over which the learning rate ramps linearly up to `lr`.
    pub warmup_updates: u64,
    /// Micro-steps whose gradients are averaged into one update.
    pub accumulation: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_updates: 1,
            accumulation: 4,
        }
    }
}

impl AdamWConfig {
    /// Warmup length covering `fraction` of `total_updates`, at least one.
    pub fn warmup_for(total_updates: u64, fraction: f64) -> u64 {
        ((total_updates as f64 * fraction).ceil() as u64).max(1)
    }

    /// Learning rate applied at update index `k` (0-based).
    pub fn lr_at(&self, k: u64) -> f64 {
        let w = self.warmup_updates.max(1);
        self.lr * ((k + 1) as f64 / w as f64).min(1.0)
    }
}

/// Per-parameter moments keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub updates: u64,
    pub m: BTreeMap<String, Tensor<f64>>,
    pub v: BTreeMap<String, Tensor<f64>>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: OptimizerState,
    pending: BTreeMap<ParamId, Tensor<f64>>,
    micro: usize,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: OptimizerState::default(),
            pending: BTreeMap::new(),
            micro: 0,
        }
    }

    pub fn with_state(config: AdamWConfig, state: OptimizerState) -> Self {
        Self {
            state,
            ..Self::new(config)
        }
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn updates(&self) -> u64 {
        self.state.updates
    }

    pub fn pending_micro_steps(&self) -> usize {
        self.micro
    }

    /// Adds one micro-step of gradients. Every `accumulation`-th call applies
    /// an update with the averaged gradient and returns the learning rate
    /// that was used.
    pub fn step<T: Real>(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<ParamId, Tensor<T>>,
    ) -> Result<Option<f64>> {
        for (id, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            let g = grads
                .get(&id)
                .ok_or_else(|| NumericsError::MissingGradient(p.name.clone()))?;
            if g.shape() != p.tensor.shape() {
                return Err(NumericsError::Shape(format!(
                    "gradient for {} is {:?}, parameter is {:?}",
                    p.name,
                    g.shape(),
                    p.tensor.shape()
                )));
            }
            let g = g.to_f64();
            match self.pending.get_mut(&id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.pending.insert(id, g);
                }
            }
        }
        self.micro += 1;
        if self.micro >= self.config.accumulation.max(1) {
            Ok(Some(self.apply(store)))
        } else {
            Ok(None)
        }
    }

    /// Applies any partially accumulated gradient, averaged over the
    /// micro-steps actually seen.
    pub fn flush(&mut self, store: &mut ParamStore) -> Option<f64> {
        (self.micro > 0).then(|| self.apply(store))
    }

    fn apply(&mut self, store: &mut ParamStore) -> f64 {
        let c = &self.config;
        let k = self.state.updates;
        let lr = c.lr_at(k);
        let t = (k + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let inv = 1.0 / self.micro as f64;
        for (id, g) in std::mem::take(&mut self.pending) {
            let p = store.get_mut(id);
            let m = self
                .state
                .m
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.tensor.rows(), p.tensor.cols()));
            let v = self
                .state
                .v
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.tensor.rows(), p.tensor.cols()));
            for (((w, &gi), mi), vi) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi * inv;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        self.micro = 0;
        self.state.updates += 1;
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (ParamStore, ParamId, ParamId) {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::filled(2, 2, 1.0), true).unwrap();
        let f = s.add("f", Tensor::filled(1, 3, 2.0), false).unwrap();
        (s, w, f)
    }

    fn cfg(accumulation: usize) -> AdamWConfig {
        AdamWConfig {
            lr: 0.1,
            warmup_updates: 1,
            accumulation,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_only_applies_weight_decay() {
        let (mut s, w, _) = store();
        let mut opt = AdamW::new(cfg(1));
        let mut g = BTreeMap::new();
        g.insert(w, Tensor::<f64>::zeros(2, 2));
        opt.step(&mut s, &g).unwrap();
        let expect = 1.0 - 0.1 * 0.01;
        for &x in s.tensor(w).data() {
            assert!((x - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let (mut s, _, _) = store();
        let mut opt = AdamW::new(cfg(1));
        let err = opt.step::<f64>(&mut s, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, NumericsError::MissingGradient(ref n) if n == "w"));
    }

    #[test]
    fn update_happens_every_accumulation_steps() {
        let (mut s, w, _) = store();
        let mut opt = AdamW::new(cfg(4));
        let mut g = BTreeMap::new();
        g.insert(w, Tensor::<f64>::filled(2, 2, 0.5));
        for i in 0..8 {
            let before = s.tensor(w).clone();
            let applied = opt.step(&mut s, &g).unwrap();
            assert_eq!(applied.is_some(), i % 4 == 3);
            assert_eq!(before == *s.tensor(w), i % 4 != 3);
        }
        assert_eq!(opt.updates(), 2);
    }

    #[test]
    fn warmup_is_linear() {
        let c = AdamWConfig {
            lr: 5e-4,
            warmup_updates: AdamWConfig::warmup_for(10_000, 0.01),
            ..AdamWConfig::default()
        };
        assert_eq!(c.warmup_updates, 100);
        assert!((c.lr_at(0) - 5e-4 / 100.0).abs() < 1e-18);
        assert!((c.lr_at(49) - 5e-4 / 2.0).abs() < 1e-18);
        assert_eq!(c.lr_at(99), 5e-4);
        assert_eq!(c.lr_at(5000), 5e-4);
    }
}
