//! AdamW with linear warmup.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, usage_err, Result};
use crate::math;
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrDecay {
    Constant,
    /// Cosine from `base_lr` to `min_lr` over `total_steps` after warmup.
    Cosine { total_steps: u64, min_lr: f64 },
    /// `base_lr · gamma^(step − warmup)`.
    Exponential { gamma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay: LrDecay,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 2.5e-3,
            warmup_steps: 250,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
            decay: LrDecay::Constant,
        }
    }
}

impl OptimConfig {
    /// Learning rate used by step number `step` (counting from 1).
    pub fn lr_at(&self, step: u64) -> f64 {
        let step = step.max(1);
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        let after = (step - self.warmup_steps.min(step)) as f64;
        match self.decay {
            LrDecay::Constant => self.lr,
            LrDecay::Cosine { total_steps, min_lr } => {
                let span = total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let t = (after / span).min(1.0);
                min_lr + 0.5 * (self.lr - min_lr) * (1.0 + math::cos(core::f64::consts::PI * t))
            }
            LrDecay::Exponential { gamma } => self.lr * libm::pow(gamma, after),
        }
    }
}

/// Per-parameter moments indexed like the [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub step: u64,
    pub m: Vec<Option<Vec<f64>>>,
    pub v: Vec<Option<Vec<f64>>>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, store: &ParamStore) -> Self {
        AdamW { cfg, step: 0, m: vec![None; store.len()], v: vec![None; store.len()] }
    }

    /// One update. Decoupled decay `w ← w·(1 − lr·wd)` precedes the
    /// bias-corrected moment step. Only listed, trainable parameters move.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<f64> {
        self.step += 1;
        let lr = self.cfg.lr_at(self.step);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - libm::pow(b1, self.step as f64);
        let c2 = 1.0 - libm::pow(b2, self.step as f64);
        let shrink = 1.0 - lr * self.cfg.weight_decay;
        for (id, g) in grads {
            let p = store.get_mut(*id);
            if !p.trainable {
                return Err(usage_err!("parameter {} is frozen", p.name));
            }
            if g.shape() != p.value.shape() {
                return Err(shape_err!("gradient {:?} for {} {:?}", g.shape(), p.name, p.value.shape()));
            }
            let n = g.len();
            let m = self.m[id.0].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[id.0].get_or_insert_with(|| vec![0.0; n]);
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w *= shrink;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= lr * (*mi / c1) / (math::sqrt(*vi / c2) + self.cfg.eps);
            }
        }
        Ok(lr)
    }
}
