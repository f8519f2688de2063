use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)
}

/// A trainable tensor together with its Adam moment estimates.
#[derive(Debug)]
pub struct Parameter {
    id: u64,
    name: String,
    value: Tensor,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    step_count: u64,
}

impl Clone for Parameter {
    // A clone is a distinct parameter as far as graph bindings are concerned.
    fn clone(&self) -> Self {
        Parameter {
            id: fresh_id(),
            name: self.name.clone(),
            value: self.value.clone(),
            adam_m: self.adam_m.clone(),
            adam_v: self.adam_v.clone(),
            step_count: self.step_count,
        }
    }
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.numel();
        Parameter {
            id: fresh_id(),
            name: name.into(),
            value: value.with_requires_grad(true),
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step_count: 0,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.value.grad()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn adam_moments(&self) -> (&[f64], &[f64]) {
        (&self.adam_m, &self.adam_v)
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        let n = self.value.numel();
        let slot = self.value.grad_mut().get_or_insert_with(|| vec![0.0; n]);
        for (s, v) in slot.iter_mut().zip(g) {
            *s += v;
        }
    }

    pub fn set_grad(&mut self, g: Vec<f64>) {
        assert_eq!(g.len(), self.value.numel(), "gradient length");
        *self.value.grad_mut() = Some(g);
    }

    pub fn clear_grad(&mut self) {
        *self.value.grad_mut() = None;
    }
}

/// Adam with bias correction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update to every parameter and clears their gradients.
    /// Nothing is modified if any parameter lacks a gradient.
    pub fn step<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) -> Result<()> {
        let mut params: Vec<&mut Parameter> = params.into_iter().collect();
        if let Some(p) = params.iter().find(|p| p.grad().is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        for p in params.iter_mut() {
            adam_update(p, self);
        }
        Ok(())
    }
}

fn adam_update(p: &mut Parameter, opt: &Adam) {
    let g = p.value.grad_mut().take().expect("checked by caller");
    p.step_count += 1;
    let t = p.step_count as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let data = p.value.data_mut();
    for i in 0..data.len() {
        let gi = g[i];
        p.adam_m[i] = opt.beta1 * p.adam_m[i] + (1.0 - opt.beta1) * gi;
        p.adam_v[i] = opt.beta2 * p.adam_v[i] + (1.0 - opt.beta2) * gi * gi;
        let m_hat = p.adam_m[i] / bc1;
        let v_hat = p.adam_v[i] / bc2;
        data[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
    }
}

/// Functional form: one Adam step with explicit hyperparameters.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    Adam {
        lr,
        beta1,
        beta2,
        eps,
    }
    .step(params)
}
