use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at
/// `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, base_lr: f64, warmup_fraction: f64) -> f64 {
    let step = step.min(total_steps);
    let warmup = (warmup_fraction * total_steps as f64).round() as u64;
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let span = total_steps.saturating_sub(warmup);
    if span == 0 {
        return base_lr;
    }
    let t = (step - warmup) as f64 / span as f64;
    base_lr * 0.5 * (1.0 + (PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter tensor plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros_like(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay `p *= 1 - lr * wd`.
pub fn adamw_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
    hyper: AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract("parameter, gradient and state counts differ"));
    }
    state.t += 1;
    let (b1, b2) = (T::lit(hyper.beta1), T::lit(hyper.beta2));
    let one = T::one();
    let bc1 = one - T::lit(hyper.beta1.powi(state.t as i32));
    let bc2 = one - T::lit(hyper.beta2.powi(state.t as i32));
    let (lr_t, decay, eps) = (T::lit(lr), one - T::lit(lr * weight_decay), T::lit(hyper.eps));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.numel() != g.len() {
            return Err(Error::dim(format!("gradient of {} entries for {:?}", g.len(), p.shape())));
        }
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi = *pi * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

pub fn global_norm<T: Scalar>(grads: &[Vec<T>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|&g| {
            let g = g.as_f64();
            g * g
        })
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients by `max_norm / norm` when their joint L2 norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::contract(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g = *g * s);
    }
    Ok(norm)
}

/// Sharpness-aware gradients: evaluates `grad_at` at
/// `params + rho * g / ||g||`. The caller's parameters are never modified, so
/// the optimizer update applies to the unperturbed point. A zero gradient
/// skips the perturbation.
pub fn sam_step<T: Scalar>(
    params: &[Tensor<T>],
    grads: &[Vec<T>],
    rho: f64,
    mut grad_at: impl FnMut(&[Tensor<T>]) -> Result<Vec<Vec<T>>>,
) -> Result<Vec<Vec<T>>> {
    if !(rho >= 0.0) {
        return Err(Error::contract(format!("rho must be non-negative, got {rho}")));
    }
    let norm = global_norm(grads);
    if norm == 0.0 || rho == 0.0 {
        return Ok(grads.to_vec());
    }
    let scale = T::lit(rho / norm);
    let perturbed: Vec<Tensor<T>> = params
        .iter()
        .zip(grads)
        .map(|(p, g)| {
            let mut q = p.clone();
            q.data_mut().iter_mut().zip(g).for_each(|(x, &gi)| *x = *x + scale * gi);
            q
        })
        .collect();
    grad_at(&perturbed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        let (total, base) = (1000, 0.5);
        assert_eq!(lr_schedule(0, total, base, 0.1), 0.0);
        assert_eq!(lr_schedule(100, total, base, 0.1), base);
        assert!((lr_schedule(550, total, base, 0.1) - base / 2.0).abs() < 1e-12);
        assert!(lr_schedule(total, total, base, 0.1).abs() < 1e-12);
        let left = lr_schedule(99, total, base, 0.1);
        let right = lr_schedule(101, total, base, 0.1);
        assert!((left - base).abs() < 0.01 && (right - base).abs() < 0.01);
    }

    #[test]
    fn adam_first_step_oracle() {
        let g = 0.3f64;
        let (lr, h) = (0.01, AdamHyper::default());
        let mut p = vec![Tensor::from_vec(&[1], vec![1.0f64]).unwrap()];
        let mut st = AdamState::zeros_like(&p);
        adamw_step(&mut p, &[vec![g]], &mut st, lr, 0.0, h).unwrap();
        let m_hat = (1.0 - h.beta1) * g / (1.0 - h.beta1);
        let v_hat = (1.0 - h.beta2) * g * g / (1.0 - h.beta2);
        let expected = 1.0 - lr * m_hat / (v_hat.sqrt() + h.eps);
        assert!((p[0].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_grad_and_decay() {
        let mut p = vec![Tensor::from_vec(&[2], vec![2.0f64, -1.0]).unwrap()];
        let mut st = AdamState::zeros_like(&p);
        adamw_step(&mut p, &[vec![0.0, 0.0]], &mut st, 0.1, 0.0, AdamHyper::default()).unwrap();
        assert_eq!(p[0].data(), &[2.0, -1.0]);
        adamw_step(&mut p, &[vec![0.0, 0.0]], &mut st, 0.1, 0.5, AdamHyper::default()).unwrap();
        let scale = 1.0 - 0.1 * 0.5;
        assert_eq!(p[0].data(), &[2.0 * scale, -scale]);
    }

    #[test]
    fn clipping_examples() {
        let mut small = vec![vec![0.3f64, 0.4]];
        clip_global_norm(&mut small, 1.0).unwrap();
        assert_eq!(small, vec![vec![0.3, 0.4]]);
        let mut big = vec![vec![4.0f64], vec![0.0]];
        assert_eq!(clip_global_norm(&mut big, 1.0).unwrap(), 4.0);
        assert_eq!(big, vec![vec![1.0], vec![0.0]]);
    }

    #[test]
    fn sam_on_quadratic() {
        // L = w^2 / 2, so the gradient equals w
        let p = vec![Tensor::from_vec(&[1], vec![1.0f64]).unwrap()];
        let g = sam_step(&p, &[vec![1.0]], 0.5, |q| Ok(vec![q[0].data().to_vec()])).unwrap();
        assert_eq!(g, vec![vec![1.5]]);
        assert_eq!(p[0].item(), 1.0);
        let plain = sam_step(&p, &[vec![1.0]], 0.0, |_| unreachable!()).unwrap();
        assert_eq!(plain, vec![vec![1.0]]);
        let zero = sam_step(&p, &[vec![0.0]], 0.5, |_| unreachable!()).unwrap();
        assert_eq!(zero, vec![vec![0.0]]);
    }
}
