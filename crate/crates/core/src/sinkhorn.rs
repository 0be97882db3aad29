//! Truncated Sinkhorn normalization with temperature.
//!
//! `S⁰(X) = exp(X)`, then `L` rounds of row normalization followed by column
//! normalization. The per-step functions and their pullbacks are public so
//! the gradient tape can unroll the iterations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real, Rng};

/// Approximately doubly stochastic matrix produced by Sinkhorn
/// normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPermutation<T> {
    entries: Matrix<T>,
}

impl<T: Real> SoftPermutation<T> {
    pub fn n(&self) -> usize {
        self.entries.rows()
    }

    pub fn entries(&self) -> &Matrix<T> {
        &self.entries
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.entries
    }

    /// Largest deviation of any row or column sum from 1.
    pub fn marginal_error(&self) -> T {
        let one = T::one();
        self.entries
            .row_sums()
            .into_iter()
            .chain(self.entries.col_sums())
            .fold(T::zero(), |acc, s| acc.max((s - one).abs()))
    }
}

/// `exp(x)`, optionally after subtracting each row's maximum.
///
/// The row shift is a per-row positive scaling, which the following row
/// normalization cancels exactly; it keeps `exp` from overflowing at low
/// temperatures. It must be off when no normalization follows.
pub fn exp_forward<T: Real>(x: &Matrix<T>, shift_rows: bool) -> Result<Matrix<T>> {
    x.ensure_finite("sinkhorn input")?;
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let shift = if shift_rows {
            row.iter().copied().fold(T::neg_infinity(), T::max)
        } else {
            T::zero()
        };
        for v in row.iter_mut() {
            *v = (*v - shift).exp();
        }
    }
    if !out.is_finite() {
        return Err(Error::ExpOverflow);
    }
    Ok(out)
}

/// Adjoint of [`exp_forward`] given its output. The row shift is treated as
/// a constant, which is exact whenever a row normalization follows.
pub fn exp_pullback<T: Real>(adjoint: &Matrix<T>, output: &Matrix<T>) -> Result<Matrix<T>> {
    adjoint.hadamard(output)
}

/// `𝒯_r`: divides every row by its sum. Returns the normalized matrix and
/// the row sums.
pub fn row_normalize<T: Real>(x: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>)> {
    let sums = x.row_sums();
    if let Some(r) = sums.iter().position(|&s| !(s > T::zero()) || !s.is_finite()) {
        return Err(Error::Underflow(format!("row {r} sums to {}", sums[r])));
    }
    let mut out = x.clone();
    for (r, &s) in sums.iter().enumerate() {
        for v in out.row_mut(r) {
            *v = *v / s;
        }
    }
    Ok((out, sums))
}

/// Adjoint of [`row_normalize`]: `dX_ij = (G_ij − Σ_k G_ik Y_ik) / s_i`.
pub fn row_normalize_pullback<T: Real>(
    adjoint: &Matrix<T>,
    output: &Matrix<T>,
    sums: &[T],
) -> Result<Matrix<T>> {
    if adjoint.shape() != output.shape() || sums.len() != output.rows() {
        return Err(Error::dim(
            "row_normalize_pullback",
            format!("adjoint {:?}, output {:?}", adjoint.shape(), output.shape()),
        ));
    }
    let mut out = adjoint.clone();
    for (r, &s) in sums.iter().enumerate() {
        let dot = adjoint
            .row(r)
            .iter()
            .zip(output.row(r))
            .fold(T::zero(), |acc, (&g, &y)| acc + g * y);
        for v in out.row_mut(r) {
            *v = (*v - dot) / s;
        }
    }
    Ok(out)
}

/// `𝒯_c`: divides every column by its sum.
pub fn col_normalize<T: Real>(x: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>)> {
    let sums = x.col_sums();
    if let Some(c) = sums.iter().position(|&s| !(s > T::zero()) || !s.is_finite()) {
        return Err(Error::Underflow(format!("column {c} sums to {}", sums[c])));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (v, &s) in out.row_mut(r).iter_mut().zip(&sums) {
            *v = *v / s;
        }
    }
    Ok((out, sums))
}

/// Adjoint of [`col_normalize`].
pub fn col_normalize_pullback<T: Real>(
    adjoint: &Matrix<T>,
    output: &Matrix<T>,
    sums: &[T],
) -> Result<Matrix<T>> {
    if adjoint.shape() != output.shape() || sums.len() != output.cols() {
        return Err(Error::dim(
            "col_normalize_pullback",
            format!("adjoint {:?}, output {:?}", adjoint.shape(), output.shape()),
        ));
    }
    let mut dots = vec![T::zero(); output.cols()];
    for r in 0..output.rows() {
        for ((d, &g), &y) in dots.iter_mut().zip(adjoint.row(r)).zip(output.row(r)) {
            *d = *d + g * y;
        }
    }
    let mut out = adjoint.clone();
    for r in 0..out.rows() {
        for ((v, &d), &s) in out.row_mut(r).iter_mut().zip(&dots).zip(sums) {
            *v = (*v - d) / s;
        }
    }
    Ok(out)
}

/// `S^L(x)`: exponentiate, then `iterations` rounds of row-then-column
/// normalization. With zero iterations the result is the plain `exp(x)`.
pub fn sinkhorn_normalize<T: Real>(x: &Matrix<T>, iterations: usize) -> Result<SoftPermutation<T>> {
    if x.rows() != x.cols() {
        return Err(Error::dim("sinkhorn_normalize", format!("non-square {:?}", x.shape())));
    }
    let mut s = exp_forward(x, iterations > 0)?;
    for _ in 0..iterations {
        s = row_normalize(&s)?.0;
        s = col_normalize(&s)?.0;
    }
    Ok(SoftPermutation { entries: s })
}

/// `P̂ = S^L(W_P / τ)`.
pub fn soft_permutation<T: Real>(
    w_p: &Matrix<T>,
    tau: f64,
    iterations: usize,
) -> Result<SoftPermutation<T>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    sinkhorn_normalize(&w_p.scale(T::of(1.0 / tau)), iterations)
}

/// Adds `scale`-weighted Gumbel noise to the logits. Off by default in
/// training (`gumbel_noise = 0`).
pub fn perturb_with_gumbel<T: Real>(w_p: &Matrix<T>, rng: &mut Rng, scale: f64) -> Matrix<T> {
    let mut out = w_p.clone();
    for x in out.as_mut_slice() {
        *x = *x + T::of(scale * rng.gumbel());
    }
    out
}

/// Linear temperature decay from `tau_start` to `tau_end` over
/// `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub total_steps: usize,
}

impl TemperatureSchedule {
    pub fn new(tau_start: f64, tau_end: f64, total_steps: usize) -> Result<Self> {
        if !(tau_start > 0.0 && tau_end > 0.0) {
            return Err(Error::Config(format!(
                "temperatures must be positive (start {tau_start}, end {tau_end})"
            )));
        }
        if tau_end > tau_start {
            return Err(Error::Config(format!(
                "tau_end {tau_end} exceeds tau_start {tau_start}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        Ok(TemperatureSchedule {
            tau_start,
            tau_end,
            total_steps,
        })
    }

    /// Temperature at `step`; out-of-range steps are clamped with a warning.
    pub fn tau_at(&self, step: usize) -> f64 {
        let step = if step > self.total_steps {
            log::warn!(
                "temperature step {step} beyond schedule length {}; clamping",
                self.total_steps
            );
            self.total_steps
        } else {
            step
        };
        if step == self.total_steps {
            return self.tau_end;
        }
        self.tau_start
            + (self.tau_end - self.tau_start) * step as f64 / self.total_steps as f64
    }
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule {
            tau_start: 1.0,
            tau_end: 0.1,
            total_steps: 50,
        }
    }
}
