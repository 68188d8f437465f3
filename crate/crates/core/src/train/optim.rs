//! Adam-family optimizers and global-norm gradient clipping.

use crate::error::{invalid, Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OptimizerKind {
    #[default]
    RectifiedAdam,
    Adam,
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::RectifiedAdam => "radam",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "radam" | "rectified-adam" => Ok(OptimizerKind::RectifiedAdam),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer {s:?} (radam|adam)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Result<Self> {
        let p = AdamParams {
            lr,
            ..Default::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid!("learning rate must be finite and >= 0, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(invalid!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

fn check<T: Real>(params: &[Tensor<T>], grads: &[Tensor<T>], state: &AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters, {} gradients, {}/{} moments",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    for (((p, g), m), v) in params.iter().zip(grads).zip(&state.m).zip(&state.v) {
        p.check_same_shape(g)?;
        p.check_same_shape(m)?;
        p.check_same_shape(v)?;
    }
    Ok(())
}

/// Updates both moments in place and returns the bias corrections
/// `(1 − β₁ᵗ, 1 − β₂ᵗ)`.
fn update_moments<T: Real>(grads: &[Tensor<T>], state: &mut AdamState<T>, hp: &AdamParams) -> (f64, f64) {
    state.t += 1;
    let (b1, b2) = (T::of(hp.beta1), T::of(hp.beta2));
    let (c1, c2) = (T::of(1.0 - hp.beta1), T::of(1.0 - hp.beta2));
    for ((g, m), v) in grads.iter().zip(&mut state.m).zip(&mut state.v) {
        for ((&gi, mi), vi) in g.data().iter().zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + c1 * gi;
            *vi = b2 * *vi + c2 * gi * gi;
        }
    }
    let t = state.t as i32;
    (1.0 - hp.beta1.powi(t), 1.0 - hp.beta2.powi(t))
}

/// Length of the approximated simple moving average at step `t`, `ρ_t`.
pub fn radam_rho(t: u64, beta2: f64) -> f64 {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let bt = beta2.powi(t as i32);
    rho_inf - 2.0 * t as f64 * bt / (1.0 - bt)
}

/// One RAdam step. While `ρ_t ≤ 5` the update is bias-corrected momentum;
/// afterwards the adaptive step is scaled by the variance rectification term.
pub fn rectified_adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    hp: &AdamParams,
) -> Result<()> {
    check(params, grads, state)?;
    let (bc1, bc2) = update_moments(grads, state, hp);
    let rho_inf = 2.0 / (1.0 - hp.beta2) - 1.0;
    let rho = radam_rho(state.t, hp.beta2);
    let step = T::of(hp.lr / bc1);
    if rho > 5.0 {
        let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
        let step = T::of(hp.lr * r / bc1);
        let (sbc2, eps) = (T::of(bc2.sqrt()), T::of(hp.eps));
        for ((p, m), v) in params.iter_mut().zip(&state.m).zip(&state.v) {
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *pi -= step * mi * sbc2 / (vi.sqrt() + eps);
            }
        }
    } else {
        for (p, m) in params.iter_mut().zip(&state.m) {
            p.axpy(-step, m);
        }
    }
    Ok(())
}

/// One Adam step with bias correction.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    hp: &AdamParams,
) -> Result<()> {
    check(params, grads, state)?;
    let (bc1, bc2) = update_moments(grads, state, hp);
    let step = T::of(hp.lr / bc1);
    let (ibc2, eps) = (T::of(1.0 / bc2), T::of(hp.eps));
    for ((p, m), v) in params.iter_mut().zip(&state.m).zip(&state.v) {
        for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            *pi -= step * mi / ((vi * ibc2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Global L2 norm over all tensors, accumulated in `f64` in a fixed order.
pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| {
            let v = v.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping. `max_norm = 0` disables clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        grads.iter_mut().for_each(|g| g.scale(s));
    }
    norm
}
