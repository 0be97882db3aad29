use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

/// Non-negative per-weight saliency, same shape as the weight.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceScores<T>(Matrix<T>);

impl<T: Real> ImportanceScores<T> {
    pub fn new(scores: Matrix<T>) -> Result<Self> {
        scores.ensure_finite("importance scores")?;
        if let Some(pos) = scores.as_slice().iter().position(|&x| x < T::zero()) {
            return Err(Error::Config(format!(
                "importance score at flat index {pos} is negative"
            )));
        }
        Ok(ImportanceScores(scores))
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.0
    }

    /// Scores with columns reordered by `perm` (`Ŝ = S·P`).
    pub fn permuted(&self, perm: &crate::assignment::PermutationIndices) -> Result<Self> {
        Ok(ImportanceScores(self.0.gather_columns(perm)?))
    }

    /// Sum of each column, used to rank channels.
    pub fn column_totals(&self) -> Vec<T> {
        self.0.col_sums()
    }
}

/// `|W|`.
pub fn magnitude_scores<T: Real>(w: &Matrix<T>) -> Result<ImportanceScores<T>> {
    ImportanceScores::new(w.map(|x| x.abs()))
}

/// `S_ij = |W_ij| · ‖X_j‖₂`, with the norm taken over every calibration
/// row.
pub fn wanda_scores<T: Real>(w: &Matrix<T>, x: &Matrix<T>) -> Result<ImportanceScores<T>> {
    if x.cols() != w.cols() {
        return Err(Error::dim(
            "wanda_scores",
            format!("weight has {} input channels, calibration has {}", w.cols(), x.cols()),
        ));
    }
    let norms: Vec<T> = x.col_sums_of_squares().into_iter().map(|s| s.sqrt()).collect();
    let mut s = w.map(|v| v.abs());
    for r in 0..s.rows() {
        for (v, &n) in s.row_mut(r).iter_mut().zip(&norms) {
            *v = *v * n;
        }
    }
    ImportanceScores::new(s)
}

impl<T: Real> Matrix<T> {
    pub(crate) fn col_sums_of_squares(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols()];
        for r in 0..self.rows() {
            for (acc, &x) in out.iter_mut().zip(self.row(r)) {
                *acc = *acc + x * x;
            }
        }
        out
    }
}

/// Pluggable importance metric. `calibration` holds the layer's input
/// activations, one sample per row.
pub trait ImportanceMetric<T: Real> {
    fn name(&self) -> &str;

    fn scores(&self, weight: &Matrix<T>, calibration: &Matrix<T>) -> Result<ImportanceScores<T>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Magnitude,
    Wanda,
}

impl<T: Real> ImportanceMetric<T> for Metric {
    fn name(&self) -> &str {
        match self {
            Metric::Magnitude => "magnitude",
            Metric::Wanda => "wanda",
        }
    }

    fn scores(&self, weight: &Matrix<T>, calibration: &Matrix<T>) -> Result<ImportanceScores<T>> {
        match self {
            Metric::Magnitude => magnitude_scores(weight),
            Metric::Wanda => wanda_scores(weight, calibration),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Magnitude => "magnitude",
            Metric::Wanda => "wanda",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(Metric::Magnitude),
            "wanda" => Ok(Metric::Wanda),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}
