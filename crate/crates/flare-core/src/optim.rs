//! AdamW, global-norm gradient clipping and the one-cycle learning rate
//! schedule. The optimizer is generic over precision and operates on flat
//! parameter/gradient slices in the model's canonical order.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// AdamW hyperparameters; the schedule supplies the learning rate per step.
#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First/second moment accumulators, one tensor per parameter, plus the
/// step counter used for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> AdamState<U> {
        AdamState {
            step: self.step,
            m: self.m.iter().map(|t| t.cast::<U>()).collect(),
            v: self.v.iter().map(|t| t.cast::<U>()).collect(),
        }
    }
}

/// The AdamW update for one parameter tensor at bias-correction step
/// `step` (1-based). Weight decay is decoupled: `p ← p − lr·wd·p` is
/// applied alongside the adaptive step, not folded into the gradient.
/// Epsilon is added outside the square root.
pub fn adamw_tensor<T: Scalar>(
    p: &mut Tensor<T>,
    g: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
        return Err(Error::shape(
            "adamw_tensor",
            format!(
                "param {:?}, grad {:?}, moments {:?}/{:?}",
                p.shape(),
                g.shape(),
                m.shape(),
                v.shape()
            ),
        ));
    }
    let t = step as i32;
    let beta1 = T::from_f64(cfg.beta1);
    let beta2 = T::from_f64(cfg.beta2);
    let one = T::ONE;
    let eps = T::from_f64(cfg.eps);
    let lr_t = T::from_f64(lr);
    let decay = T::from_f64(lr * cfg.weight_decay);
    let bias1 = one / (one - beta1.powi(t));
    let bias2 = one / (one - beta2.powi(t));
    let pd = p.data_mut();
    let gd = g.data();
    let md = m.data_mut();
    let vd = v.data_mut();
    for j in 0..pd.len() {
        md[j] = beta1 * md[j] + (one - beta1) * gd[j];
        vd[j] = beta2 * vd[j] + (one - beta2) * gd[j] * gd[j];
        let m_hat = md[j] * bias1;
        let v_hat = vd[j] * bias2;
        pd[j] = pd[j] - decay * pd[j] - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// One AdamW update over all parameters, advancing the step counter.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adamw_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    state.step += 1;
    for i in 0..grads.len() {
        adamw_tensor(
            params[i],
            &grads[i],
            &mut state.m[i],
            &mut state.v[i],
            state.step,
            lr,
            cfg,
        )?;
    }
    Ok(())
}

/// Scales all gradients in place so their global L2 norm does not exceed
/// `max_norm`, returning the pre-clip norm. Zero gradients pass through.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::invalid_value(
            "clip_grad_norm",
            format!("max_norm {} must be positive", max_norm),
        ));
    }
    let mut sq = 0.0_f64;
    for g in grads.iter() {
        for &x in g.data() {
            let x = x.to_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    Ok(norm)
}

/// One-cycle schedule: linear ramp reaching `lr_max` on the last warmup
/// step, cosine decay to zero at the final step. The first decay step is
/// also `lr_max`, so the junction is flat.
pub fn onecycle_lr(step: usize, total_steps: usize, lr_max: f64, warmup_frac: f64) -> f64 {
    assert!(step < total_steps, "step {} out of {}", step, total_steps);
    assert!(warmup_frac > 0.0 && warmup_frac < 1.0);
    assert!(lr_max > 0.0);
    let warmup = ((warmup_frac * total_steps as f64).round() as usize).max(1);
    if step < warmup {
        return lr_max * (step + 1) as f64 / warmup as f64;
    }
    let span = total_steps - 1 - warmup;
    let t = if span == 0 {
        1.0
    } else {
        (step - warmup) as f64 / span as f64
    };
    lr_max * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}
