use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ImportanceScores;
use crate::error::{Error, Result};
use crate::numerics::{softmax, Matrix, Real};

/// `n_zero` of every `group` consecutive weights along a row are pruned.
/// Written `N:M` (`2:4` keeps two of every four).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NmConfig {
    pub n_zero: usize,
    pub group: usize,
}

impl NmConfig {
    pub fn new(n_zero: usize, group: usize) -> Result<Self> {
        if n_zero == 0 || n_zero >= group {
            return Err(Error::Config(format!(
                "N:M requires 0 < N < M, got {n_zero}:{group}"
            )));
        }
        if group > 256 {
            return Err(Error::Config(format!("group width {group} exceeds 256")));
        }
        Ok(NmConfig { n_zero, group })
    }

    /// Retained weights per group (`M − N`).
    pub fn keep(&self) -> usize {
        self.group - self.n_zero
    }

    pub fn density(&self) -> f64 {
        self.keep() as f64 / self.group as f64
    }

    pub fn check_divides(&self, len: usize, what: &str) -> Result<()> {
        if len == 0 || !len.is_multiple_of(self.group) {
            return Err(Error::Config(format!(
                "group {} must divide {what} ({len})",
                self.group
            )));
        }
        Ok(())
    }
}

impl fmt::Display for NmConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.n_zero, self.group)
    }
}

impl FromStr for NmConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (n, m) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("expected N:M, got `{s}`")))?;
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad N:M component `{t}`")))
        };
        NmConfig::new(parse(n)?, parse(m)?)
    }
}

/// Binary mask with exactly `M − N` ones in every row group.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityMask<T> {
    mask: Matrix<T>,
    cfg: NmConfig,
}

impl<T: Real> SparsityMask<T> {
    pub fn new(mask: Matrix<T>, cfg: NmConfig) -> Result<Self> {
        check_nm_mask(&mask, cfg)?;
        Ok(SparsityMask { mask, cfg })
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.mask
    }

    pub fn config(&self) -> NmConfig {
        self.cfg
    }

    pub fn density(&self) -> f64 {
        let ones = self.mask.as_slice().iter().filter(|&&x| x == T::one()).count();
        ones as f64 / self.mask.as_slice().len() as f64
    }

    pub fn apply(&self, w: &Matrix<T>) -> Result<Matrix<T>> {
        w.masked(&self.mask)
    }
}

/// Per-group softmax of scores; each group lies on the simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask<T> {
    weights: Matrix<T>,
    cfg: NmConfig,
}

impl<T: Real> SoftMask<T> {
    pub fn matrix(&self) -> &Matrix<T> {
        &self.weights
    }

    pub fn config(&self) -> NmConfig {
        self.cfg
    }
}

/// Verifies a 0/1 mask keeps exactly `M − N` entries per group.
pub fn check_nm_mask<T: Real>(mask: &Matrix<T>, cfg: NmConfig) -> Result<()> {
    cfg.check_divides(mask.cols(), "the column count")?;
    for r in 0..mask.rows() {
        for (g, chunk) in mask.row(r).chunks(cfg.group).enumerate() {
            if chunk.iter().any(|&x| x != T::zero() && x != T::one()) {
                return Err(Error::NmViolation {
                    row: r,
                    group: g,
                    detail: "mask entries must be 0 or 1".into(),
                });
            }
            let ones = chunk.iter().filter(|&&x| x == T::one()).count();
            if ones != cfg.keep() {
                return Err(Error::NmViolation {
                    row: r,
                    group: g,
                    detail: format!("{ones} retained, expected {}", cfg.keep()),
                });
            }
        }
    }
    Ok(())
}

/// Verifies a masked weight matrix has at most `M − N` occupied entries per
/// group. Anything other than `+0.0` (including `-0.0`) counts as occupied.
pub fn check_nm_weights<T: Real>(w: &Matrix<T>, cfg: NmConfig) -> Result<()> {
    cfg.check_divides(w.cols(), "the column count")?;
    for r in 0..w.rows() {
        for (g, chunk) in w.row(r).chunks(cfg.group).enumerate() {
            let occupied = chunk.iter().filter(|&&x| is_occupied(x)).count();
            if occupied > cfg.keep() {
                return Err(Error::NmViolation {
                    row: r,
                    group: g,
                    detail: format!("{occupied} nonzeros, at most {} allowed", cfg.keep()),
                });
            }
        }
    }
    Ok(())
}

#[inline]
pub(crate) fn is_occupied<T: Real>(x: T) -> bool {
    x != T::zero() || x.is_sign_negative()
}

/// Keeps the `M − N` largest scores of every group; ties go to the lower
/// column index.
pub fn nm_mask<T: Real>(s: &ImportanceScores<T>, cfg: NmConfig) -> Result<SparsityMask<T>> {
    let s = s.matrix();
    cfg.check_divides(s.cols(), "the column count")?;
    let mut mask = Matrix::zeros(s.rows(), s.cols());
    let mut order: Vec<usize> = Vec::with_capacity(cfg.group);
    for r in 0..s.rows() {
        let row = s.row(r);
        for g0 in (0..s.cols()).step_by(cfg.group) {
            let group = &row[g0..g0 + cfg.group];
            order.clear();
            order.extend(0..cfg.group);
            // stable sort keeps lower indices first among equal scores
            order.sort_by(|&a, &b| group[b].partial_cmp(&group[a]).expect("finite scores"));
            for &k in &order[..cfg.keep()] {
                mask[(r, g0 + k)] = T::one();
            }
        }
    }
    debug_assert!(check_nm_mask(&mask, cfg).is_ok());
    Ok(SparsityMask { mask, cfg })
}

/// Per-group softmax of the (permuted) scores.
pub fn soft_mask<T: Real>(s_hat: &ImportanceScores<T>, cfg: NmConfig) -> Result<SoftMask<T>> {
    Ok(SoftMask {
        weights: group_softmax(s_hat.matrix(), cfg)?,
        cfg,
    })
}

pub(crate) fn group_softmax<T: Real>(s: &Matrix<T>, cfg: NmConfig) -> Result<Matrix<T>> {
    cfg.check_divides(s.cols(), "the column count")?;
    let mut out = s.clone();
    for r in 0..out.rows() {
        for chunk in out.row_mut(r).chunks_mut(cfg.group) {
            let sm = softmax(chunk)?;
            chunk.copy_from_slice(&sm);
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of the per-group softmax: for each group,
/// `m̂ ⊙ (g − ⟨g, m̂⟩)`.
pub fn soft_mask_pullback<T: Real>(
    adjoint: &Matrix<T>,
    soft: &Matrix<T>,
    cfg: NmConfig,
) -> Result<Matrix<T>> {
    if adjoint.shape() != soft.shape() {
        return Err(Error::dim(
            "soft_mask_pullback",
            format!("{:?} vs {:?}", adjoint.shape(), soft.shape()),
        ));
    }
    cfg.check_divides(soft.cols(), "the column count")?;
    let mut out = Matrix::zeros(soft.rows(), soft.cols());
    for r in 0..soft.rows() {
        let g_row = adjoint.row(r);
        let m_row = soft.row(r);
        let o_row = out.row_mut(r);
        for g0 in (0..m_row.len()).step_by(cfg.group) {
            let range = g0..g0 + cfg.group;
            let dot = g_row[range.clone()]
                .iter()
                .zip(&m_row[range.clone()])
                .fold(T::zero(), |acc, (&g, &m)| acc + g * m);
            for k in range {
                o_row[k] = m_row[k] * (g_row[k] - dot);
            }
        }
    }
    Ok(out)
}

/// `Σ S ⊙ M`.
pub fn retained_score<T: Real>(s: &ImportanceScores<T>, m: &SparsityMask<T>) -> Result<T> {
    Ok(s.matrix().hadamard(m.matrix())?.sum())
}
