use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::autograd::Real;

/// Hyper-parameters of the decoupled-weight-decay Adam optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warm-up length in steps (0 disables warm-up).
    pub warmup_steps: usize,
    /// Global gradient-norm clip (0 disables clipping).
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            warmup_steps: 100,
            clip_norm: 1.0,
        }
    }
}

/// AdamW with a linear warm-up schedule. Moments live alongside the
/// parameters they track and can be checkpointed.
#[derive(Debug, Clone)]
pub struct AdamW<F: Real> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<F>) -> Self {
        let zeros = || store.iter().map(|(_, _, v)| ArrayD::zeros(v.raw_dim())).collect();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        let warm = if self.cfg.warmup_steps == 0 {
            1.0
        } else {
            ((self.step + 1) as f64 / self.cfg.warmup_steps as f64).min(1.0)
        };
        self.cfg.lr * warm
    }

    /// Applies one update. Returns the pre-clip global gradient norm.
    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &[ArrayD<F>]) -> f64 {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        let norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt();
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let decay = F::of(1.0 - lr * self.cfg.weight_decay);
        let (b1f, b2f) = (F::of(b1), F::of(b2));
        let (one_b1, one_b2) = (F::of(1.0 - b1), F::of(1.0 - b2));
        let clipf = F::of(clip);
        let step_size = F::of(lr / bc1);
        let bc2_sqrt = F::of(bc2.sqrt());
        let eps = F::of(self.cfg.eps);
        for (i, g) in grads.iter().enumerate() {
            let p = store.get_mut(ParamId(i));
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * clipf;
                    *m = b1f * *m + one_b1 * g;
                    *v = b2f * *v + one_b2 * g * g;
                    *p = *p * decay - step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
                });
        }
        norm
    }
}
