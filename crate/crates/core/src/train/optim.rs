use std::f64::consts::PI;

use crate::autodiff::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Linear warmup from 0 to `lr` over `warmup_proportion * total_steps`, then cosine decay to 0.
pub fn cosine_lr(step: usize, total_steps: usize, lr: f64, warmup_proportion: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps) as f64;
    let total = total_steps as f64;
    let warmup = warmup_proportion * total;
    if step < warmup {
        return lr * step / warmup;
    }
    let span = total - warmup;
    if span <= 0.0 {
        return lr;
    }
    lr * 0.5 * (1.0 + (PI * (step - warmup) / span).cos())
}

/// Global L2 norm over every gradient tensor.
pub fn global_norm(grads: &[Tensor<f32>]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            *g = g.map(|x| x * s);
        }
    }
    norm
}

/// Adam moments for a list of parameter tensors, kept in `f32` so that a
/// saved state resumes bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        Adam { m: params.iter().map(|p| vec![0.0; p.numel()]).collect(), v: params.iter().map(|p| vec![0.0; p.numel()]).collect(), t: 0 }
    }

    /// Applies one bias-corrected update with learning rate `lr`.
    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = p.to_vec();
            for (j, x) in data.iter_mut().enumerate() {
                let gj = f64::from(g.data()[j]);
                let mj = ADAM_BETA1 * f64::from(m[j]) + (1.0 - ADAM_BETA1) * gj;
                let vj = ADAM_BETA2 * f64::from(v[j]) + (1.0 - ADAM_BETA2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + ADAM_EPS);
                *x = (f64::from(*x) - update) as f32;
            }
            *p = Tensor::new(p.shape().to_vec(), data).expect("shape unchanged");
        }
    }
}
