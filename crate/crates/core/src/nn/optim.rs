use super::unet::{Gradients, UNetModel};
use crate::error::{Error, Result};

fn check_shapes(model: &UNetModel, grads: &Gradients) -> Result<()> {
    let params = model.parameter_slices();
    if params.len() != grads.0.len() || params.iter().zip(&grads.0).any(|(p, g)| p.len() != g.len())
    {
        return Err(Error::shape("gradient blobs do not match model parameters"));
    }
    Ok(())
}

/// θ ← θ − lr · g
pub fn sgd_step(model: &mut UNetModel, grads: &Gradients, lr: f64) -> Result<()> {
    check_shapes(model, grads)?;
    for (p, g) in model.parameter_slices_mut().into_iter().zip(&grads.0) {
        for (pv, gv) in p.iter_mut().zip(g) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &UNetModel) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .parameter_slices()
            .iter()
            .map(|s| vec![0.0; s.len()])
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Bias-corrected Adam:
///
/// ```text
/// m ← β₁ m + (1 − β₁) g          v ← β₂ v + (1 − β₂) g²
/// θ ← θ − lr · m̂ / (√v̂ + ε)      m̂ = m / (1 − β₁ᵗ), v̂ = v / (1 − β₂ᵗ)
/// ```
pub fn adam_step(
    model: &mut UNetModel,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    check_shapes(model, grads)?;
    if state.m.len() != grads.0.len()
        || state
            .m
            .iter()
            .zip(&grads.0)
            .any(|(m, g)| m.len() != g.len())
    {
        return Err(Error::shape("Adam state does not match model parameters"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (blob, p) in model.parameter_slices_mut().into_iter().enumerate() {
        let (m, v, g) = (&mut state.m[blob], &mut state.v[blob], &grads.0[blob]);
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
