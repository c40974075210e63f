//! Adam with decoupled weight decay, the SAM outer step and the linear
//! schedule.

use super::TrainError;
use crate::netcore::ModelParams;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// `v0 · (1 - 0.99·(e-1)/(E-1))` for `1 ≤ e ≤ E`: starts at `v0`, ends at
/// `v0 / 100`.
pub fn linear_decay(v0: f64, epoch: usize, epochs: usize) -> Result<f64, TrainError> {
    if epoch < 1 || epoch > epochs {
        return Err(TrainError::Config(format!(
            "epoch {epoch} outside [1, {epochs}]"
        )));
    }
    if epochs == 1 {
        return Ok(v0);
    }
    Ok(v0 * (1.0 - 0.99 * (epoch - 1) as f64 / (epochs - 1) as f64))
}

/// One Adam step followed by decoupled decay:
///
/// ```text
/// m ← β1 m + (1-β1) g          v ← β2 v + (1-β2) g²
/// p ← p - lr · m̂ / (√v̂ + ε) - lr · wd · p
/// ```
///
/// where `m̂, v̂` are the bias-corrected moments and the decay term uses the
/// pre-step `p`. Non-finite gradients abort before anything is modified.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    lr: f64,
    wd: f64,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(TrainError::Config(
            "parameter, gradient and state layouts differ".into(),
        ));
    }
    if let Some((name, index)) = grads.first_non_finite() {
        return Err(TrainError::NonFiniteGradient { name, index });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let tensors = params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()));
    for (((_, p), (_, g)), ((_, m), (_, v))) in tensors {
        ndarray::Zip::from(p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + cfg.eps) + lr * wd * *p;
            });
    }
    Ok(())
}

/// SAM perturbation `ρ · g / ‖g‖₂` (global norm), or `None` when the
/// gradient vanishes.
pub fn sam_perturbation(grad: &ModelParams, rho: f64) -> Option<ModelParams> {
    let norm = grad.l2_norm();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    let mut eps = grad.clone();
    eps.scale(rho / norm);
    Some(eps)
}

/// Result of the gradient computations behind one SAM step.
#[derive(Clone, Debug)]
pub struct SamGradients {
    /// Loss at the unperturbed parameters.
    pub loss: f64,
    /// Gradient at the unperturbed parameters.
    pub first: ModelParams,
    /// Gradient handed to the inner optimizer.
    pub second: ModelParams,
}

/// Computes the SAM gradient: `g1 = ∇L(θ)`, `ε = ρ g1/‖g1‖`, `g2 = ∇L(θ+ε)`.
/// `params` is restored bit-for-bit before returning. With `ρ = 0`, or a
/// zero `g1`, `g2 = g1`.
pub fn sam_gradients<F>(
    params: &mut ModelParams,
    rho: f64,
    mut loss_grad: F,
) -> Result<SamGradients, TrainError>
where
    F: FnMut(&ModelParams) -> Result<(f64, ModelParams), TrainError>,
{
    let (loss, first) = loss_grad(params)?;
    if rho <= 0.0 {
        return Ok(SamGradients {
            loss,
            second: first.clone(),
            first,
        });
    }
    let Some(eps) = sam_perturbation(&first, rho) else {
        return Ok(SamGradients {
            loss,
            second: first.clone(),
            first,
        });
    };
    let saved = params.clone();
    params.add_scaled(1.0, &eps);
    let second = loss_grad(params);
    *params = saved;
    let (_, second) = second?;
    Ok(SamGradients {
        loss,
        first,
        second,
    })
}

/// Full SAM step with AdamW as the inner optimizer. Returns the loss at the
/// unperturbed parameters.
#[allow(clippy::too_many_arguments)]
pub fn sam_step<F>(
    params: &mut ModelParams,
    state: &mut AdamState,
    rho: f64,
    lr: f64,
    wd: f64,
    cfg: &AdamConfig,
    loss_grad: F,
) -> Result<f64, TrainError>
where
    F: FnMut(&ModelParams) -> Result<(f64, ModelParams), TrainError>,
{
    let g = sam_gradients(params, rho, loss_grad)?;
    adamw_step(params, &g.second, state, lr, wd, cfg)?;
    Ok(g.loss)
}
