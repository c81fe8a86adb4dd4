//! Optimizers and learning-rate schedules. Parameters are updated through a
//! flat list of (value, grad) pairs owned by the training loop, keeping the
//! update order explicit and deterministic.

use crate::tensor::Tensor;

/// Decoupled-weight-decay adaptive optimizer (AdamW-style).
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(param_shapes: &[Vec<usize>], weight_decay: f32) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One update over (param, grad) pairs. `decay_mask[i] = false` exempts a
    /// parameter (biases, norm gains) from weight decay.
    pub fn step(&mut self, params: &mut [(&mut Tensor, &Tensor)], decay_mask: &[bool], lr: f32) {
        self.step += 1;
        let t = self.step as f32;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, (value, grad)) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            debug_assert_eq!(m.shape(), grad.shape());
            let decay = if decay_mask[i] { self.weight_decay } else { 0.0 };
            for (((pv, &gv), mv), vv) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * *pv);
            }
        }
    }
}

/// Plain SGD with momentum.
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(param_shapes: &[Vec<usize>], momentum: f32, weight_decay: f32) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [(&mut Tensor, &Tensor)], lr: f32) {
        for (i, (value, grad)) in params.iter_mut().enumerate() {
            let vel = &mut self.velocity[i];
            for ((pv, &gv), vv) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(vel.data_mut())
            {
                let g = gv + self.weight_decay * *pv;
                *vv = self.momentum * *vv + g;
                *pv -= lr * *vv;
            }
        }
    }
}

/// One-cycle schedule: linear warmup to the peak over the first 30% of
/// steps, cosine anneal down to peak/100 afterwards.
pub fn one_cycle_lr(peak: f32, step: usize, total_steps: usize) -> f32 {
    let total = total_steps.max(1) as f32;
    let warmup = (0.3 * total).max(1.0);
    let s = step as f32;
    if s < warmup {
        peak * (0.04 + 0.96 * s / warmup)
    } else {
        let p = ((s - warmup) / (total - warmup).max(1.0)).clamp(0.0, 1.0);
        let floor = peak / 100.0;
        floor + 0.5 * (peak - floor) * (1.0 + (std::f32::consts::PI * p).cos())
    }
}

/// Step decay: multiply by `gamma` once the epoch passes `step_fraction` of
/// the schedule.
pub fn step_lr(base: f32, epoch: usize, total_epochs: usize, step_fraction: f32, gamma: f32) -> f32 {
    let boundary = (total_epochs as f32 * step_fraction).floor() as usize;
    if epoch >= boundary.max(1) {
        base * gamma
    } else {
        base
    }
}
