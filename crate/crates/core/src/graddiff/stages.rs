use std::any::Any;

use super::{Differentiation, Stage, StageAdjoint};
use crate::assignment::{dense_permutation, solve_lsa, PermutationIndices};
use crate::error::{Error, Result};
use crate::numerics::{softmax, Matrix, Real};
use crate::sinkhorn;
use crate::sparsity::{group_softmax, nm_mask, soft_mask_pullback, ImportanceScores, NmConfig};

fn cached<C>(cache: &Option<C>) -> Result<&C> {
    cache.as_ref().ok_or(Error::BackwardBeforeForward)
}

fn last_item<'a, T>(input: &'a [Matrix<T>], stage: &str) -> Result<&'a Matrix<T>> {
    input
        .last()
        .ok_or_else(|| Error::Config(format!("stage `{stage}` received an empty value list")))
}

/// `x ↦ c·x` on every item.
pub struct Scale<T> {
    factor: T,
}

impl<T: Real> Scale<T> {
    pub fn new(factor: T) -> Self {
        Scale { factor }
    }
}

impl<T: Real> Stage<T> for Scale<T> {
    fn name(&self) -> &str {
        "scale"
    }

    fn forward(&mut self, input: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
        Ok(input.iter().map(|m| m.scale(self.factor)).collect())
    }

    fn pullback(&mut self, adjoint: &[Matrix<T>]) -> Result<StageAdjoint<T>> {
        Ok(StageAdjoint::input_only(
            adjoint.iter().map(|g| g.scale(self.factor)).collect(),
        ))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Elementwise `exp`, optionally after a per-row max shift (valid only when
/// a row normalization follows).
pub struct Exp<T> {
    shift_rows: bool,
    outputs: Option<Vec<Matrix<T>>>,
}

impl<T: Real> Exp<T> {
    pub fn shifted() -> Self {
        Exp {
            shift_rows: true,
            outputs: None,
        }
    }

    pub fn unshifted() -> Self {
        Exp {
            shift_rows: false,
            outputs: None,
        }
    }
}

impl<T: Real> Stage<T> for Exp<T> {
    fn name(&self) -> &str {
        "exp"
    }

    fn forward(&mut self, input: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
        let out = input
            .iter()
            .map(|m| sinkhorn::exp_forward(m, self.shift_rows))
            .collect::<Result<Vec<_>>>()?;
        self.outputs = Some(out.clone());
        Ok(out)
    }

    fn pullback(&mut self, adjoint: &[Matrix<T>]) -> Result<StageAdjoint<T>> {
        let outs = cached(&self.outputs)?;
        Ok(StageAdjoint::input_only(
            adjoint
                .iter()
                .zip(outs)
                .map(|(g, y)| sinkhorn::exp_pullback(g, y))
                .collect::<Result<_>>()?,
        ))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

type NormCache<T> = Vec<(Matrix<T>, Vec<T>)>;

/// Row normalization `𝒯_r` on every item.
pub struct RowNorm<T> {
    cache: Option<NormCache<T>>,
}

impl<T: Real> RowNorm<T> {
    pub fn new() -> Self {
        RowNorm { cache: None }
    }
}

impl<T: Real> Default for RowNorm<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Stage<T> for RowNorm<T> {
    fn name(&self) -> &str {
        "row-norm"
    }

    fn forward(&mut self, input: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
        let cache = input
            .iter()
            .map(sinkhorn::row_normalize)
            .collect::<Result<NormCache<T>>>()?;
        let out = cache.iter().map(|(y, _)| y.clone()).collect();
        self.cache = Some(cache);
        Ok(out)
    }

    fn pullback(&mut self, adjoint: &[Matrix<T>]) -> Result<StageAdjoint<T>> {
        let cache = cached(&self.cache)?;
        Ok(StageAdjoint::input_only(
            adjoint
                .iter()
                .zip(cache)
                .map(|(g, (y, s))| sinkhorn::row_normalize_pullback(g, y, s))
                .collect::<Result<_>>()?,
        ))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Column normalization `𝒯_c` on every item.
pub struct ColNorm<T> {
    cache: Option<NormCache<T>>,
}

impl<T: Real> ColNorm<T> {
    pub fn new() -> Self {
        ColNorm { cache: None }
    }
}

impl<T: Real> Default for ColNorm<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Stage<T> for ColNorm<T> {
    fn name(&self) -> &str {
        "col-norm"
    }

    fn forward(&mut self, input: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
        let cache = input
            .iter()
            .map(sinkhorn::col_normalize)
            .collect::<Result<NormCache<T>>>()?;
        let out = cache.iter().map(|(y, _)| y.clone()).collect();
        self.cache = Some(cache);
        Ok(out)
    }

    fn pullback(&mut self, adjoint: &[Matrix<T>]) -> Result<StageAdjoint<T>> {
        let cache = cached(&self.cache)?;
        Ok(StageAdjoint::input_only(
            adjoint
                .iter()
                .zip(cache)
                .map(|(g, (y, s))| sinkhorn::col_normalize_pullback(g, y, s))
                .collect::<Result<_>>()?,
        ))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// `x ↦ A·x` with a parameter matrix `A`.
pub struct Linear<T> {
    name: String,
    a: Matrix<T>,
    inputs: Option<Vec<Matrix<T>>>,
}

impl<T: Real> Linear<T> {
    pub fn new(name: impl Into<String>, a: Matrix<T>) -> Self {
        Linear {
            name: name.into(),
            a,
            inputs: None,
        }
    }
}

impl<T: Real> Stage<T> for Linear<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn check_input(&self, shapes: &[(usize, usize)]) -> std::result::Result<(), String> {
        match shapes.iter().find(|s| s.0 != self.a.cols()) {
            Some(s) => Err(format!("expects {} rows, got {:?}", self.a.cols(), s)),
            None => Ok(()),
        }
    }

    fn forward(&mut self, input: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
        let out = input
            .iter()
            .map(|x| self.a.matmul(x))
            .collect::<Result<Vec<_>>>()?;
        self.inputs = Some(input.to_vec());
        Ok(out)
    }

    fn pullback(&mut self, adjoint: &[Matrix<T>]) -> Result<StageAdjoint<T>> {
        let xs = cached(&self.inputs)?;
        let mut d_a = Matrix::zeros(self.a.rows(), self.a.cols());
        let mut input = Vec::with_capacity(xs.len());
        for (g, x) in adjoint.iter().zip(xs) {
            d_a.add_assign(&g.matmul_nt(x)?)?;
            input.push(self.a.matmul_tn(g)?);
        }
        Ok(StageAdjoint {
            input,
            params: vec![d_a],
        })
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Softmax over each row of each item.
pub struct RowSoftmax<T> {
    outputs: Option<Vec<Matrix<T>>>,
}

impl<T: Real> RowSoftmax<T> {
    pub fn new() -> Self {
        RowSoftmax { outputs: None }
    }
}

impl<T: Real> Default for RowSoftmax<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Stage<T> for RowSoftmax<T> {
    fn name(&self) -> &str {
        "row-softmax"
    }

    fn forward(&mut self, input: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
        let mut out = Vec::with_capacity(input.len());
        for m in input {
            let mut y = m.clone();
            for r in 0..y.rows() {
                let s = softmax(m.row(r))?;
                y.row_mut(r).copy_from_slice(&s);
            }
            out.push(y);
        }
        self.outputs = Some(out.clone());
        Ok(out)
    }

    fn pullback(&mut self, adjoint: &[Matrix<T>]) -> Result<StageAdjoint<T>> {
        let outs = cached(&self.outputs)?;
        let mut res = Vec::with_capacity(outs.len());
        for (g, y) in adjoint.iter().zip(outs) {
            let mut d = g.clone();
            for r in 0..y.rows() {
                let dot = g
                    .row(r)
                    .iter()
                    .zip(y.row(r))
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                for (v, &yv) in d.row_mut(r).iter_mut().zip(y.row(r)) {
                    *v = yv * (*v - dot);
                }
            }
            res.push(d);
        }
        Ok(StageAdjoint::input_only(res))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// `[x] ↦ [Σ w ⊙ x]` as a 1×1 value.
pub struct Dot<T> {
    weights: Matrix<T>,
}

impl<T: Real> Dot<T> {
    pub fn new(weights: Matrix<T>) -> Self {
        Dot { weights }
    }
}

impl<T: Real> Stage<T> for Dot<T> {
    fn name(&self) -> &str {
        "dot"
    }

    fn check_input(&self, shapes: &[(usize, usize)]) -> std::result::Result<(), String> {
        if shapes != [self.weights.shape()] {
            return Err(format!("expects [{:?}], got {shapes:?}", self.weights.shape()));
        }
        Ok(())
    }

    fn forward(&mut self, input: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
        let v = input[0].hadamard(&self.weights)?.sum();
        Ok(vec![Matrix::filled(1, 1, v)])
    }

    fn pullback(&mut self, adjoint: &[Matrix<T>]) -> Result<StageAdjoint<T>> {
        Ok(StageAdjoint::input_only(vec![self.weights.scale(adjoint[0][(0, 0)])]))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Projects every soft permutation block onto its closest hard permutation
/// (linear sum assignment). Straight-through: `∂P/∂P̂ = 1`.
pub struct Harden {
    perms: Vec<PermutationIndices>,
}

impl Harden {
    pub fn new() -> Self {
        Harden { perms: Vec::new() }
    }

    /// Per-block permutations from the last forward pass.
    pub fn permutations(&self) -> &[PermutationIndices] {
        &self.perms
    }
}

impl Default for Harden {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Stage<T> for Harden {
    fn name(&self) -> &str {
        "harden"
    }

    fn differentiation(&self) -> Differentiation {
        Differentiation::StraightThrough
    }

    fn forward(&mut self, input: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
        self.perms = input
            .iter()
            .map(|p| solve_lsa(p).map(|a| a.perm))
            .collect::<Result<_>>()?;
        Ok(self.perms.iter().map(dense_permutation).collect())
    }

    fn pullback(&mut self, adjoint: &[Matrix<T>]) -> Result<StageAdjoint<T>> {
        Ok(StageAdjoint::input_only(adjoint.to_vec()))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Per-group softmax of the last item (the soft mask `M̂`).
pub struct GroupSoftmax<T> {
    cfg: NmConfig,
    output: Option<Matrix<T>>,
}

impl<T: Real> GroupSoftmax<T> {
    pub fn new(cfg: NmConfig) -> Self {
        GroupSoftmax { cfg, output: None }
    }
}

impl<T: Real> Stage<T> for GroupSoftmax<T> {
    fn name(&self) -> &str {
        "group-softmax"
    }

    fn check_input(&self, shapes: &[(usize, usize)]) -> std::result::Result<(), String> {
        match shapes.last() {
            Some(&(_, c)) if c % self.cfg.group == 0 => Ok(()),
            other => Err(format!("last item {other:?} not divisible into groups of {}", self.cfg.group)),
        }
    }

    fn forward(&mut self, input: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
        let m_hat = group_softmax(last_item(input, "group-softmax")?, self.cfg)?;
        let mut out = input.to_vec();
        *out.last_mut().expect("non-empty") = m_hat.clone();
        self.output = Some(m_hat);
        Ok(out)
    }

    fn pullback(&mut self, adjoint: &[Matrix<T>]) -> Result<StageAdjoint<T>> {
        let m_hat = cached(&self.output)?;
        let mut out = adjoint.to_vec();
        let last = out.len() - 1;
        out[last] = soft_mask_pullback(&adjoint[last], m_hat, self.cfg)?;
        Ok(StageAdjoint::input_only(out))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Replaces the last item (soft mask) with the hard N:M mask of the same
/// scores. Straight-through.
pub struct MaskSte {
    cfg: NmConfig,
}

impl MaskSte {
    pub fn new(cfg: NmConfig) -> Self {
        MaskSte { cfg }
    }
}

impl<T: Real> Stage<T> for MaskSte {
    fn name(&self) -> &str {
        "mask"
    }

    fn differentiation(&self) -> Differentiation {
        Differentiation::StraightThrough
    }

    fn forward(&mut self, input: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
        let scores = ImportanceScores::new(last_item(input, "mask")?.clone())?;
        let mask = nm_mask(&scores, self.cfg)?;
        let mut out = input.to_vec();
        *out.last_mut().expect("non-empty") = mask.matrix().clone();
        Ok(out)
    }

    fn pullback(&mut self, adjoint: &[Matrix<T>]) -> Result<StageAdjoint<T>> {
        Ok(StageAdjoint::input_only(adjoint.to_vec()))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
