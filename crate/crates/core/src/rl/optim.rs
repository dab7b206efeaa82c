use crate::tensor::{Gradients, Tensor};

/// Linear warmup from 0 to `peak`, then cosine decay to 0 at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Rescales `grads` in place so the global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &[Tensor], beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros = |t: &Tensor| Tensor::new(t.shape().to_vec(), vec![0.0; t.numel()]).expect("shape");
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }

    /// Parameters without a gradient entry are only decayed.
    pub fn step(&mut self, params: &mut [Tensor], grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let decay = 1.0 - lr * self.weight_decay;
            let g = grads.get(i);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                if self.weight_decay != 0.0 {
                    *w *= decay;
                }
                let gj = g.map_or(0.0, |g| g.data()[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *w -= lr * update;
            }
        }
    }
}
