//! AdamW with cosine learning-rate annealing.

use crate::tensor::{ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Decoupled-weight-decay Adam. Moment buffers are keyed by parameter index
/// and created lazily; frozen parameters are never touched.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, first: Vec::new(), second: Vec::new(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let bias1 = 1.0 - self.cfg.beta1.powi(t);
        let bias2 = 1.0 - self.cfg.beta2.powi(t);
        if self.first.len() < store.len() {
            self.first.resize(store.len(), Vec::new());
            self.second.resize(store.len(), Vec::new());
        }
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            if m.is_empty() {
                *m = vec![0.0; grad.len()];
                *v = vec![0.0; grad.len()];
            }
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                let g = g.as_f64();
                *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g;
                *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g;
                let update = (*m / bias1) / ((*v / bias2).sqrt() + self.cfg.eps);
                let decayed = w.as_f64() * (1.0 - lr * self.cfg.weight_decay);
                *w = T::lit(decayed - lr * update);
            }
        }
    }
}

/// Rescales all stored grads so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let total: f64 = store
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum();
    let norm = total.sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for p in store.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

/// Cosine decay from `base` to `min` over `total` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub min: f64,
    pub total: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total == 0 {
            return self.base;
        }
        let progress = (step.min(self.total) as f64) / self.total as f64;
        self.min + 0.5 * (self.base - self.min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
