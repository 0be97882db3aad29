use serde::{Deserialize, Serialize};

use super::{Matrix, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment buffers for a list of parameter blocks.
#[derive(Clone, Debug)]
pub struct AdamWState<T> {
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    step: u64,
}

impl<T: Real> AdamWState<T> {
    pub fn new(params: &[Matrix<T>]) -> Self {
        AdamWState {
            m: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Matrix<T>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Matrix<T>] {
        &self.v
    }
}

/// One decoupled-weight-decay Adam update over every parameter block.
///
/// The whole update is rejected (no block is modified) if any gradient is
/// non-finite.
pub fn adamw_step<T: Real>(
    params: &mut [Matrix<T>],
    grads: &[Matrix<T>],
    state: &mut AdamWState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(
            "adamw_step",
            format!(
                "{} parameter blocks, {} gradients, {} state buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::dim(
                "adamw_step",
                format!("block {i}: param {:?}, grad {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter block {i}")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let lr = T::of(cfg.lr);
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let eps = T::of(cfg.eps);
    let decay = T::one() - lr * T::of(cfg.weight_decay);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let p = p.as_mut_slice();
        let m = m.as_mut_slice();
        let v = v.as_mut_slice();
        for (i, &gi) in g.as_slice().iter().enumerate() {
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
