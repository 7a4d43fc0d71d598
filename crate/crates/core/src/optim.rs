//! Plain SGD (used for fine-tuning) and AdamW (used for pretraining).
//! Both operate on flat tensor pairs so any parameter container that can
//! enumerate its matrices in a fixed order can be optimized.

use crate::linalg::Mat;

/// One SGD step without momentum: p -= lr * g.
pub fn sgd_step(p: &mut Mat, g: &Mat, lr: f64) {
    debug_assert_eq!(p.data.len(), g.data.len());
    for (pv, gv) in p.data.iter_mut().zip(&g.data) {
        *pv -= lr * gv;
    }
}

/// Cosine annealing from `lr_max` to zero over `total` epochs.
/// epoch is 0-based; epoch 0 returns lr_max.
pub fn cosine_lr(lr_max: f64, epoch: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr_max;
    }
    let t = epoch.min(total - 1) as f64 / (total - 1) as f64;
    0.5 * lr_max * (1.0 + (std::f64::consts::PI * t).cos())
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
        }
    }

    /// Advance the shared step counter; call once per optimizer step,
    /// before updating the tensors of that step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&self, p: &mut Mat, g: &Mat, m: &mut Mat, v: &mut Mat) {
        debug_assert!(self.t >= 1, "begin_step must run before update");
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..p.data.len() {
            let grad = g.data[i];
            m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * grad;
            v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * grad * grad;
            let mhat = m.data[i] / bc1;
            let vhat = v.data[i] / bc2;
            p.data[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p.data[i]);
        }
    }
}
